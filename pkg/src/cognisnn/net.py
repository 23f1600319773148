"""CogniSNN: a stem ConvBNSN triplet feeding ResNodes wired by a random DAG.

All tensors inside the network are time-major, ``[T, N, C, H, W]``. Every
ResNode keeps the channel count ``c_node`` and its spatial size; spatial
reduction happens only on the edges, through standard pooling (SP) followed by
tailored pooling (TP) down to the smallest predecessor extent.
"""

from __future__ import annotations

import copy
import json
import re
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Collection, Sequence

import numpy as np

from .errors import DimensionError, FormatError, InvalidArgumentError
from .neuron import NeuronConfig, lif_multistep
from .tensor import (RunningStats, Tensor, as_tensor, avg_pool, batch_norm, conv2d, linear,
                     no_grad, reshape, sigmoid)
from .topology import DagTopology

GATES = ("OR", "ADD", "AND", "IAND", "NONE")
_TASK_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    input_size: int = 8
    c_node: int = 32
    kernel: int = 3
    gate: str = "OR"
    eta: int = 1
    kappa: int = 2
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        if self.gate not in GATES:
            raise InvalidArgumentError(f"gate must be one of {GATES}, got {self.gate!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidArgumentError(f"kernel must be odd and positive, got {self.kernel}")
        for name in ("in_channels", "input_size", "c_node", "eta", "kappa"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["neuron"] = NeuronConfig(**data.get("neuron", {}))
        return cls(**data)


# --- pooling and aggregation -------------------------------------------------

def spatial_dim(o) -> int:
    return o.shape[-1]


def sp_pools(dim: int, eta: int, kappa: int) -> bool:
    # floor guard: never pool below one pixel or across a ragged window
    return dim >= eta and dim >= kappa and dim % kappa == 0


def standard_pool(o: Tensor, eta: int, kappa: int) -> Tensor:
    """Average-pool by ``kappa`` when the spatial extent is at least ``eta``."""
    return avg_pool(o, kappa) if sp_pools(spatial_dim(o), eta, kappa) else o


def tailored_pool(o: Tensor, target_dim: int) -> Tensor:
    dim = spatial_dim(o)
    if target_dim < 1 or dim % target_dim:
        raise DimensionError(f"cannot pool extent {dim} down to {target_dim}")
    return avg_pool(o, dim // target_dim)


def aggregate_inputs(predecessors: Sequence[tuple[Tensor, Tensor]], eta: int, kappa: int) -> Tensor:
    """Sum of sigmoid(gain) * TP(SP(output)) over ``(output, raw_gain)`` pairs."""
    if not predecessors:
        raise InvalidArgumentError("aggregate_inputs needs at least one predecessor")
    pooled = [standard_pool(as_tensor(o), eta, kappa) for o, _ in predecessors]
    channels = {p.shape[-3] for p in pooled}
    if len(channels) != 1:
        raise DimensionError(f"predecessor channel counts disagree: {sorted(channels)}")
    target = min(spatial_dim(p) for p in pooled)
    total = None
    for p, (_, gain) in zip(pooled, predecessors):
        term = sigmoid(as_tensor(gain)) * tailored_pool(p, target)
        total = term if total is None else total + term
    return total


def combine_gate(o1: Tensor, o2: Tensor, gate: str) -> Tensor:
    """Skip connection between the first triplet's output ``o1`` and the second's ``o2``."""
    if gate == "OR":
        return o2 + o1 - o2 * o1
    if gate == "ADD":
        return o1 + o2
    if gate == "AND":
        return o1 * o2
    if gate == "IAND":
        return (1.0 - o2) * o1
    if gate == "NONE":
        return o2
    raise InvalidArgumentError(f"unknown gate {gate!r}")


@dataclass
class Triplet:
    """Views onto one ConvBNSN unit's parameters and running statistics."""

    conv: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats


def triplet_forward(x: Tensor, unit: Triplet, neuron: NeuronConfig, training: bool,
                    smooth: bool = False) -> Tensor:
    """Conv -> BN -> spiking neuron on ``x[T, N, C, H, W]``; BN statistics span T and N."""
    pad = unit.conv.shape[-1] // 2
    y = conv2d(x, unit.conv, stride=1, padding=pad)
    t, n, c, h, w = y.shape
    y = batch_norm(reshape(y, (t * n, c, h, w)), unit.gamma, unit.beta, unit.stats, training)
    return lif_multistep(reshape(y, (t, n, c, h, w)), neuron, smooth)


def resnode_forward(first: Triplet, second: Triplet, i_t: Tensor, neuron: NeuronConfig, gate: str,
                    training: bool = False, smooth: bool = False,
                    eval_layers: Collection[int] = ()) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(O, O1, O2)``; ``eval_layers`` lists triplets (1, 2) forced into eval-mode BN."""
    o1 = triplet_forward(i_t, first, neuron, training and 1 not in eval_layers, smooth)
    o2 = triplet_forward(o1, second, neuron, training and 2 not in eval_layers, smooth)
    return combine_gate(o1, o2, gate), o1, o2


# --- model -------------------------------------------------------------------

STEM = "stem"


def triplet_prefixes(node: int) -> tuple[str, str]:
    return f"node.{node}.t1", f"node.{node}.t2"


def edge_path(i: int, j: int) -> str:
    return f"edge.{i}-{j}.gain"


def head_paths(task: str) -> tuple[str, str]:
    return f"head.{task}.weight", f"head.{task}.bias"


class CogniSNN:
    """Parameters, running statistics and forward pass of one network.

    ``params`` maps a stable dotted path to every learnable leaf tensor;
    ``stats`` maps each BN layer prefix to its running statistics.
    """

    def __init__(self, topology: DagTopology, config: ModelConfig, seed: int = 0,
                 heads: dict[str, int] | None = None):
        self.topology = topology
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}
        self.heads: dict[str, int] = {}
        self._rng = np.random.default_rng(seed)
        self.node_dims = self._plan_dims()

        c = config.c_node
        self._add_triplet(STEM, config.in_channels, c)
        for v in range(topology.n):
            for prefix in triplet_prefixes(v):
                self._add_triplet(prefix, c, c)
        for i, j in topology.edges:
            self.params[edge_path(i, j)] = Tensor(np.zeros(()), requires_grad=True)
        for task, classes in (heads or {}).items():
            self.add_head(task, classes)

    # construction

    def _add_triplet(self, prefix: str, c_in: int, c_out: int) -> None:
        k = self.config.kernel
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.params[f"{prefix}.conv"] = Tensor(self._rng.uniform(-bound, bound, (c_out, c_in, k, k)),
                                               requires_grad=True)
        self.params[f"{prefix}.bn.gamma"] = Tensor(np.ones(c_out), requires_grad=True)
        self.params[f"{prefix}.bn.beta"] = Tensor(np.zeros(c_out), requires_grad=True)
        self.stats[prefix] = RunningStats(c_out)

    def add_head(self, task: str, classes: int, seed: int | None = None) -> None:
        """Append a classifier head; ``seed`` makes its init independent of earlier draws."""
        if not _TASK_RE.match(task):
            raise InvalidArgumentError(f"task id must be alphanumeric/underscore/dash, got {task!r}")
        if task in self.heads:
            raise InvalidArgumentError(f"task {task!r} already has a classifier head")
        if classes < 1:
            raise InvalidArgumentError(f"classifier head needs at least one class, got {classes}")
        c = self.config.c_node
        bound = 1.0 / np.sqrt(c)
        weight, bias = head_paths(task)
        rng = self._rng if seed is None else np.random.default_rng(seed)
        self.params[weight] = Tensor(rng.uniform(-bound, bound, (classes, c)), requires_grad=True)
        self.params[bias] = Tensor(np.zeros(classes), requires_grad=True)
        self.heads[task] = classes

    def _plan_dims(self) -> dict[int, int]:
        """Spatial extent of each node's input (and output) ahead of any forward pass."""
        cfg = self.config
        dims: dict[int, int] = {}
        for j in self.topology.topological_order():
            preds = self.topology.predecessors[j]
            if not preds:
                dims[j] = cfg.input_size
                continue
            pooled = [d // cfg.kappa if sp_pools(d, cfg.eta, cfg.kappa) else d
                      for d in (dims[i] for i in preds)]
            target = min(pooled)
            if any(d % target for d in pooled):
                raise DimensionError(f"node {j}: predecessor extents {pooled} do not divide evenly")
            dims[j] = target
        return dims

    def clone(self) -> "CogniSNN":
        other = copy.copy(self)
        other.params = {p: Tensor(t.data.copy(), requires_grad=True) for p, t in self.params.items()}
        other.stats = {}
        for prefix, s in self.stats.items():
            fresh = RunningStats(len(s.mean))
            fresh.mean[:] = s.mean
            fresh.var[:] = s.var
            other.stats[prefix] = fresh
        other.heads = dict(self.heads)
        other.node_dims = dict(self.node_dims)
        other._rng = copy.deepcopy(self._rng)
        return other

    def with_gate(self, gate: str) -> "CogniSNN":
        """Copy sharing no state, identical weights, different skip connection."""
        other = self.clone()
        other.config = replace(self.config, gate=gate)
        return other

    def triplet(self, prefix: str) -> Triplet:
        p = self.params
        return Triplet(p[f"{prefix}.conv"], p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], self.stats[prefix])

    def node_parameter_paths(self, node: int) -> list[str]:
        return [path for prefix in triplet_prefixes(node) for path in
                (f"{prefix}.conv", f"{prefix}.bn.gamma", f"{prefix}.bn.beta")]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, s in self.stats.items():
            out[f"{prefix}.bn.running_mean"] = s.mean
            out[f"{prefix}.bn.running_var"] = s.var
        return out

    # forward

    def features(self, x, training: bool = False, smooth: bool = False, record: dict | None = None,
                 order: Sequence[int] | None = None, eval_bn: Collection[str] = ()) -> Tensor:
        """Time-averaged, spatially pooled mean of the sink outputs: ``[N, c_node]``.

        ``x`` is ``[T, N, C, H, W]``. BN layers whose prefix is in ``eval_bn``
        use running statistics even when ``training`` is set.
        """
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 5 or x.shape[2] != cfg.in_channels or x.shape[3:] != (cfg.input_size, cfg.input_size):
            raise DimensionError(f"expected input [T, N, {cfg.in_channels}, {cfg.input_size}, "
                                 f"{cfg.input_size}], got {x.shape}")
        stem = triplet_forward(x, self.triplet(STEM), cfg.neuron,
                               training and STEM not in eval_bn, smooth)
        if record is not None:
            record["input"] = x.data
            record["stem"] = stem.data
        order = self.topology.topological_order() if order is None else list(order)
        self._check_order(order)
        outputs: dict[int, Tensor] = {}
        for j in order:
            preds = self.topology.predecessors[j]
            if preds:
                i_t = aggregate_inputs([(outputs[i], self.params[edge_path(i, j)]) for i in preds],
                                       cfg.eta, cfg.kappa)
            else:
                i_t = stem
            first, second = triplet_prefixes(j)
            frozen = [slot for slot, prefix in ((1, first), (2, second)) if prefix in eval_bn]
            out, o1, o2 = resnode_forward(self.triplet(first), self.triplet(second), i_t, cfg.neuron,
                                          cfg.gate, training, smooth, frozen)
            outputs[j] = out
            if record is not None:
                record[j] = {"input": i_t.data, "o1": o1.data, "o2": o2.data, "out": out.data}
        sinks = self.topology.sinks
        pooled = None
        for v in sinks:
            g = outputs[v].mean(axis=(3, 4))
            pooled = g if pooled is None else pooled + g
        pooled = pooled * (1.0 / len(sinks))
        feats = pooled.mean(axis=0)
        if record is not None:
            record["features"] = feats.data
        return feats

    def _check_order(self, order: Sequence[int]) -> None:
        position = {v: k for k, v in enumerate(order)}
        if sorted(order) != list(range(self.topology.n)) or any(
                position[i] > position[j] for i, j in self.topology.edges):
            raise InvalidArgumentError("node order is not a topological order of the graph")

    def logits(self, features: Tensor, task: str) -> Tensor:
        if task not in self.heads:
            raise InvalidArgumentError(f"unknown task id {task!r}; known: {sorted(self.heads)}")
        weight, bias = head_paths(task)
        return linear(features, self.params[weight], self.params[bias])

    def forward(self, x, task: str, training: bool = False, smooth: bool = False,
                record: dict | None = None, order: Sequence[int] | None = None,
                eval_bn: Collection[str] = ()) -> Tensor:
        """Class logits ``[N, classes]``; a single ``[T, C, H, W]`` sample gives ``[classes]``."""
        if task not in self.heads:
            raise InvalidArgumentError(f"unknown task id {task!r}; known: {sorted(self.heads)}")
        x = as_tensor(x)
        single = x.ndim == 4
        if single:
            x = Tensor(x.data[:, None])
        out = self.logits(self.features(x, training, smooth, record, order, eval_bn), task)
        return reshape(out, out.shape[1:]) if single else out


def forward(model: CogniSNN, x, task: str, **kwargs) -> Tensor:
    return model.forward(x, task, **kwargs)


# --- spike statistics --------------------------------------------------------

def _coverage(size: int, kernel: int) -> np.ndarray:
    """How many same-padded output positions read each input position."""
    pad = kernel // 2
    line = np.array([min(i + pad, size - 1) - max(i - pad, 0) + 1 for i in range(size)], dtype=float)
    return np.outer(line, line)


def _event_ops(values: np.ndarray, c_out: int, kernel: int) -> tuple[float, float]:
    """Operations a same-padded conv performs when driven by ``values[..., C, H, W]``.

    Integer-valued inputs count one accumulate per unit of value per synapse;
    any other nonzero input counts one multiply-accumulate per synapse.
    """
    cov = _coverage(values.shape[-1], kernel)
    integral = np.all(values == np.round(values))
    if integral:
        return float(c_out * np.sum(values * cov)), 0.0
    return 0.0, float(c_out * np.sum((values != 0) * cov))


@dataclass
class SpikeStats:
    stem_rate: float
    node_rates: dict[int, float]
    node_max: dict[int, float]
    node_sop: dict[int, float]
    sop: float
    mac: float
    stem_mac: float
    aggregation_mac: float
    time_steps: int
    samples: int


def spike_statistics(model: CogniSNN, x, task: str | None = None, record: dict | None = None) -> SpikeStats:
    """Firing rates and operation counts from one inference pass over ``x[T, N, C, H, W]``.

    Synaptic operations (``sop``) are accumulates triggered by spike-valued
    tensors: the second triplet's conv input, source nodes' first conv input
    (the stem spikes), and each node output as it is pooled into every
    successor (sinks feed the readout once). ``mac`` counts real-valued
    multiply-accumulates: the stem conv on the encoded input, the first conv of
    non-source nodes, the gain-weighted sums, and the classifier.
    """
    cfg = model.config
    k = cfg.kernel
    c = cfg.c_node
    record = {} if record is None else record
    with no_grad():
        feats = model.features(x, record=record)
    x_data = record["input"]
    t_steps, n = x_data.shape[:2]

    stem_mac = float(t_steps * n * cfg.in_channels * c * _coverage(cfg.input_size, k).sum())
    sop = mac = 0.0
    aggregation_mac = 0.0
    rates, maxima, node_sop = {}, {}, {}
    topo = model.topology
    for j in range(topo.n):
        rec = record[j]
        s1, m1 = _event_ops(rec["input"], c, k)
        s2, m2 = _event_ops(rec["o1"], c, k)
        fan_out = len(topo.successors[j]) or 1
        out = rec["out"]
        if np.all(out == np.round(out)):
            s3, m3 = fan_out * float(out.sum()), 0.0
        else:
            s3, m3 = 0.0, fan_out * float(np.count_nonzero(out))
        node_sop[j] = s1 + s2 + s3
        sop += node_sop[j]
        mac += m1 + m2 + m3
        for i in topo.predecessors[j]:
            aggregation_mac += float(rec["input"].size)
        rates[j] = float(out.mean())
        maxima[j] = float(out.max()) if out.size else 0.0
    if task is not None:
        mac += float(np.count_nonzero(feats.data)) * model.heads[task]
    mac += stem_mac + aggregation_mac
    return SpikeStats(float(record["stem"].mean()), rates, maxima, node_sop, sop, mac, stem_mac,
                      aggregation_mac, t_steps, n)


# --- checkpoint container ----------------------------------------------------

MAGIC = b"CSNNCKPT"
FORMAT_VERSION = 1


def encode_checkpoint(model: CogniSNN, metadata: dict | None = None,
                      arrays: dict[str, np.ndarray] | None = None) -> bytes:
    """Binary container: header, embedded topology text, then parameter records."""
    header = {"config": model.config.to_dict(), "heads": [[t, k] for t, k in model.heads.items()],
              "metadata": metadata or {}}
    topo = model.topology.to_text().encode("utf-8")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    records = [(p, t.data) for p, t in model.params.items()]
    records += list(model.buffers().items())
    records += [(f"aux.{name}", np.asarray(a, dtype=np.float64)) for name, a in (arrays or {}).items()]
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION),
           struct.pack("<I", len(topo)), topo,
           struct.pack("<I", len(head)), head,
           struct.pack("<I", len(records))]
    for path, values in records:
        name = path.encode("utf-8")
        values = np.asarray(values, dtype="<f8")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<B", values.ndim))
        out.append(struct.pack(f"<{values.ndim}I", *values.shape))
        out.append(values.tobytes(order="C"))
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError(f"checkpoint truncated: wanted {count} bytes", self.pos)
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> tuple[CogniSNN, dict, dict[str, np.ndarray]]:
    reader = _Reader(blob)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a CogniSNN checkpoint (bad magic)", 0)
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    (size,) = reader.unpack("<I")
    topology = DagTopology.from_text(reader.take(size).decode("utf-8"))
    (size,) = reader.unpack("<I")
    offset = reader.pos
    try:
        header = json.loads(reader.take(size).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}", offset) from exc
    model = CogniSNN(topology, config, heads={t: k for t, k in header["heads"]})
    buffers = model.buffers()
    arrays: dict[str, np.ndarray] = {}
    (count,) = reader.unpack("<I")
    seen = set()
    for _ in range(count):
        offset = reader.pos
        (name_len,) = reader.unpack("<H")
        path = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if path.startswith("aux."):
            arrays[path[4:]] = values
            continue
        target = model.params[path].data if path in model.params else buffers.get(path)
        if target is None or target.shape != values.shape:
            raise FormatError(f"record {path!r} does not match the model layout", offset)
        target[...] = values
        seen.add(path)
    missing = (set(model.params) | set(buffers)) - seen
    if missing:
        raise FormatError(f"checkpoint lacks records: {sorted(missing)[:5]}", reader.pos)
    if reader.pos != len(blob):
        raise FormatError("trailing bytes after last record", reader.pos)
    return model, header["metadata"], arrays
