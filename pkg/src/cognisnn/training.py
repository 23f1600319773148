"""Surrogate-gradient training: loss, optimizers, freezing, BPTT steps, FD checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .data import EncodedDataset
from .errors import InvalidArgumentError, NumericError
from .net import STEM, CogniSNN, triplet_prefixes
from .tensor import Tensor, backward, log_softmax, no_grad

OPTIMIZERS = ("adam", "sgd")
SCHEDULES = ("constant", "cosine")
# whole-network curvature makes h=1e-4 truncation error reach ~1e-3 relative; 1e-5 keeps it near 1e-5
GRADCHECK_STEP = 1e-5
# gradients smaller than this are compared absolutely rather than relatively
GRADCHECK_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    smooth_mode: bool = False
    clip_norm: float | None = 10.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgumentError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise InvalidArgumentError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise InvalidArgumentError("learning rate and weight decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidArgumentError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int, total: int | None = None) -> float:
        """Learning rate for 1-based ``epoch`` of ``total`` (default ``epochs``); cosine decays towards zero."""
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / (total or self.epochs)))


@dataclass(frozen=True)
class FreezeMask:
    """Parameter paths that an update must leave bit-identical."""

    frozen: frozenset[str] = frozenset()

    @classmethod
    def everything(cls, model: CogniSNN) -> "FreezeMask":
        return cls(frozenset(model.params))

    @classmethod
    def all_except(cls, model: CogniSNN, trainable: Iterable[str]) -> "FreezeMask":
        keep = set(trainable)
        unknown = keep - set(model.params)
        if unknown:
            raise InvalidArgumentError(f"unknown parameter paths: {sorted(unknown)[:5]}")
        return cls(frozenset(p for p in model.params if p not in keep))

    def trainable(self, model: CogniSNN) -> list[str]:
        return [p for p in model.params if p not in self.frozen]

    def eval_bn(self, model: CogniSNN) -> frozenset[str]:
        """BN layers whose affine parameters are frozen run on their running statistics."""
        prefixes = [STEM] + [p for v in range(model.topology.n) for p in triplet_prefixes(v)]
        return frozenset(p for p in prefixes
                         if f"{p}.bn.gamma" in self.frozen and f"{p}.bn.beta" in self.frozen)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[N, K]`` (or ``[K]``) against integer labels."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
    classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise InvalidArgumentError(f"{logits.shape[0]} logit rows but {labels.size} labels")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise InvalidArgumentError(f"labels must lie in [0, {classes}), got {labels.tolist()}")
    picked = log_softmax(logits)[np.arange(len(labels)), labels]
    return -picked.mean()


# --- optimizers ---------------------------------------------------------------

class Optimizer:
    """Adam or SGD-with-momentum over named parameters; weight decay as an L2 gradient term."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lr = config.lr
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.steps = 0

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        self.steps += 1
        for path, g in grads.items():
            p = params[path]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            slot = self.state.setdefault(path, {})
            if cfg.optimizer == "sgd":
                if cfg.momentum:
                    buf = slot.get("momentum")
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    slot["momentum"] = buf
                    g = buf
                p.data = p.data - self.lr * g
            else:
                beta1, beta2, eps = 0.9, 0.999, 1e-8
                m = slot.get("m", np.zeros_like(p.data))
                v = slot.get("v", np.zeros_like(p.data))
                m = beta1 * m + (1 - beta1) * g
                v = beta2 * v + (1 - beta2) * g * g
                slot["m"], slot["v"] = m, v
                m_hat = m / (1 - beta1 ** self.steps)
                v_hat = v / (1 - beta2 ** self.steps)
                p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + eps)


def _non_finite_path(model: CogniSNN, grads: dict[str, np.ndarray]) -> str | None:
    for path, t in model.params.items():
        if not np.all(np.isfinite(t.data)):
            return path
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            return path
    return None


def apply_update(model: CogniSNN, loss: Tensor, optimizer: Optimizer, mask: FreezeMask,
                 clip_norm: float | None = None) -> float:
    """Backpropagate ``loss`` and update every parameter not in ``mask``."""
    value = loss.item()
    trainable = mask.trainable(model)
    found = backward(loss)
    grads = {p: np.asarray(found.get(model.params[p], np.zeros_like(model.params[p].data)))
             for p in trainable}
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}", _non_finite_path(model, grads) or "loss")
    bad = _non_finite_path(model, grads)
    if bad is not None:
        raise NumericError("non-finite gradient", bad)
    if clip_norm is not None and grads:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip_norm:
            scale = clip_norm / norm
            grads = {p: g * scale for p, g in grads.items()}
    optimizer.update(model.params, grads)
    for t in model.params.values():
        t.grad = None
    return value


def train_step(model: CogniSNN, batch: tuple[np.ndarray, np.ndarray], config: TrainConfig,
               mask: FreezeMask = FreezeMask(), task: str | None = None,
               optimizer: Optimizer | None = None) -> float:
    """One BPTT update on ``batch = (x[T, N, C, H, W], labels[N])``; returns the loss."""
    task = task or next(iter(model.heads))
    optimizer = optimizer or Optimizer(config)
    x, y = batch
    logits = model.forward(x, task, training=True, smooth=config.smooth_mode, eval_bn=mask.eval_bn(model))
    return apply_update(model, cross_entropy_loss(logits, y), optimizer, mask, config.clip_norm)


# --- gradient check -------------------------------------------------------------

def parameter_group(path: str) -> str:
    """Path with node/edge/task identifiers dropped, e.g. ``node.t2.bn.gamma``."""
    parts = path.split(".")
    if parts[0] in ("node", "head"):
        return ".".join([parts[0]] + parts[2:])
    if parts[0] == "edge":
        return "edge.gain"
    return path


@dataclass
class GradCheckReport:
    max_rel_error: float
    group_errors: dict[str, float]
    checked: int
    worst: tuple[str, tuple, float, float] | None = None

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float, floor: float = GRADCHECK_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(model: CogniSNN, sample: tuple[np.ndarray, np.ndarray], task: str | None = None,
                   n_params: int = 200, step: float = GRADCHECK_STEP, seed: int = 0,
                   loss_fn: Callable[[CogniSNN], Tensor] | None = None) -> GradCheckReport:
    """Compare tape gradients with central differences on a random subset of scalars.

    Runs in smooth mode with training-mode BN; running statistics are restored
    afterwards. Every parameter tensor contributes at least one coordinate.
    """
    task = task or next(iter(model.heads))
    x, y = sample
    saved = {k: (s.mean.copy(), s.var.copy()) for k, s in model.stats.items()}

    if loss_fn is None:
        def loss_fn(m: CogniSNN) -> Tensor:
            return cross_entropy_loss(m.forward(x, task, training=True, smooth=True), y)

    def value() -> float:
        with no_grad():
            return loss_fn(model).item()

    found = backward(loss_fn(model))
    rng = np.random.default_rng(seed)
    paths = list(model.params)
    chosen = [(path, tuple(int(rng.integers(d)) for d in model.params[path].shape)) for path in paths]
    sizes = [model.params[p].size for p in paths]
    offsets = np.cumsum([0] + sizes)
    extra = max(0, min(n_params, offsets[-1]) - len(chosen))
    for flat in np.sort(rng.choice(offsets[-1], size=extra, replace=False)):
        k = int(np.searchsorted(offsets, flat, side="right")) - 1
        shape = model.params[paths[k]].shape
        chosen.append((paths[k], tuple(int(i) for i in np.unravel_index(flat - offsets[k], shape))))

    groups: dict[str, float] = {}
    worst = None
    max_err = 0.0
    for path, index in chosen:
        tensor = model.params[path]
        analytic = float(np.asarray(found.get(tensor, np.zeros_like(tensor.data)))[index])
        original = tensor.data[index]
        tensor.data[index] = original + step
        up = value()
        tensor.data[index] = original - step
        down = value()
        tensor.data[index] = original
        numeric = (up - down) / (2 * step)
        err = relative_error(analytic, numeric)
        group = parameter_group(path)
        groups[group] = max(groups.get(group, 0.0), err)
        if err >= max_err:
            max_err = err
            worst = (path, index, analytic, numeric)
    for k, (mean, var) in saved.items():
        model.stats[k].mean[:] = mean
        model.stats[k].var[:] = var
    for t in model.params.values():
        t.grad = None
    return GradCheckReport(max_err, groups, len(chosen), worst)


# --- epochs ---------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float
    spike_rate: float

    def to_line(self) -> str:
        return (f"epoch={self.epoch} split={self.split} loss={self.loss!r} "
                f"accuracy={self.accuracy!r} spike_rate={self.spike_rate!r}")

    @classmethod
    def from_line(cls, line: str) -> "EpochMetrics":
        fields = dict(item.split("=", 1) for item in line.split())
        return cls(int(fields["epoch"]), fields["split"], float(fields["loss"]),
                   float(fields["accuracy"]), float(fields["spike_rate"]))


def _node_rate(record: dict, model: CogniSNN) -> float:
    outs = [record[v]["out"] for v in range(model.topology.n)]
    return float(np.mean([o.mean() for o in outs]))


def evaluate(model: CogniSNN, data: EncodedDataset, task: str | None = None, batch_size: int = 100,
             smooth: bool = False) -> EpochMetrics:
    """Eval-mode loss, accuracy and mean node firing rate over ``data``."""
    task = task or next(iter(model.heads))
    if len(data) == 0:
        raise InvalidArgumentError("cannot evaluate on an empty dataset")
    total_loss = correct = 0.0
    rates = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            x, y = data.batch(slice(start, start + batch_size))
            record: dict = {}
            logits = model.forward(x, task, smooth=smooth, record=record)
            total_loss += cross_entropy_loss(logits, y).item() * len(y)
            correct += float(np.sum(np.argmax(logits.data, axis=1) == y))
            rates.append(_node_rate(record, model) * len(y))
    n = len(data)
    return EpochMetrics(0, "eval", total_loss / n, correct / n, float(np.sum(rates)) / n)


def predict_logits(model: CogniSNN, data: EncodedDataset, task: str, batch_size: int = 100) -> np.ndarray:
    with no_grad():
        return np.concatenate([model.forward(data.batch(slice(s, s + batch_size))[0], task).data
                               for s in range(0, len(data), batch_size)])


@dataclass
class FitResult:
    model: CogniSNN
    metrics: list[EpochMetrics] = field(default_factory=list)


def fit(model: CogniSNN, dataset: EncodedDataset, config: TrainConfig, mask: FreezeMask = FreezeMask(),
        task: str | None = None, eval_sets: dict[str, EncodedDataset] | None = None,
        step_fn: Callable | None = None) -> FitResult:
    """Seeded epoch loop over shuffled mini-batches; updates ``model`` in place.

    ``step_fn(model, x, y, index, optimizer)`` replaces the default
    cross-entropy step and must return ``(loss, logits)``.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot fit on an empty dataset")
    task = task or next(iter(model.heads))
    optimizer = Optimizer(config)
    rng = np.random.default_rng(config.seed)
    eval_bn = mask.eval_bn(model)
    result = FitResult(model)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        optimizer.lr = config.lr_at(epoch)
        total_loss = correct = rate = 0.0
        for start in range(0, len(order), config.batch_size):
            index = np.sort(order[start:start + config.batch_size])
            x, y = dataset.batch(index)
            if step_fn is None:
                record: dict = {}
                logits = model.forward(x, task, training=True, smooth=config.smooth_mode,
                                       record=record, eval_bn=eval_bn)
                loss = apply_update(model, cross_entropy_loss(logits, y), optimizer, mask, config.clip_norm)
                rate += _node_rate(record, model) * len(y)
                logits = logits.data
            else:
                loss, logits = step_fn(model, x, y, index, optimizer)
            total_loss += loss * len(y)
            correct += float(np.sum(np.argmax(logits, axis=1) == y))
        n = len(dataset)
        result.metrics.append(EpochMetrics(epoch, "train", total_loss / n, correct / n, rate / n))
        for split, data in (eval_sets or {}).items():
            m = evaluate(model, data, task, smooth=config.smooth_mode)
            result.metrics.append(EpochMetrics(epoch, split, m.loss, m.accuracy, m.spike_rate))
    return result
