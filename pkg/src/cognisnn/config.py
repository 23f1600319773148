"""Experiment configuration: a sectioned key = value file mapped onto frozen dataclasses."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import ENCODINGS, SynthSpec, TaskSplit, encode, load_idx, synth_tasks
from .errors import ConfigError, InvalidArgumentError
from .net import ModelConfig
from .neuron import NeuronConfig
from .topology import DagTopology, chain, generate_er, generate_ws
from .training import TrainConfig

GENERATORS = ("ER", "WS", "chain", "file")


@dataclass(frozen=True)
class TopologySpec:
    generator: str = "ER"
    n: int = 7
    p: float = 0.6
    k: int = 4
    p_rewire: float = 0.75
    seed: int = 0
    file: str = ""

    def build(self, base: Path | None = None) -> DagTopology:
        if self.generator == "ER":
            return generate_er(self.n, self.p, self.seed)
        if self.generator == "WS":
            return generate_ws(self.n, self.k, self.p_rewire, self.seed)
        if self.generator == "chain":
            return chain(self.n)
        if self.generator == "file":
            if not self.file:
                raise ConfigError("topology generator 'file' needs a 'file' key")
            path = Path(self.file)
            if base is not None and not path.is_absolute():
                path = base / path
            return DagTopology.from_text(path.read_text())
        raise ConfigError(f"topology generator must be one of {GENERATORS}, got {self.generator!r}")


@dataclass(frozen=True)
class ModelSpec:
    c_node: int = 16
    gate: str = "OR"
    time_steps: int = 4
    kernel: int = 3
    eta: int = 1
    kappa: int = 2
    v_threshold: float = 1.0
    tau: float = 2.0
    surrogate: str = "arctan"
    surrogate_width: float = 2.0

    def model_config(self, in_channels: int, input_size: int) -> ModelConfig:
        neuron = NeuronConfig(self.v_threshold, self.tau, self.surrogate, self.surrogate_width)
        return ModelConfig(in_channels, input_size, self.c_node, self.kernel, self.gate, self.eta,
                           self.kappa, neuron)


@dataclass(frozen=True)
class DataSpec:
    source: str = "synth"
    similarity: str = "near"
    size: int = 8
    train_per_class: int = 500
    test_per_class: int = 100
    noise: float = 0.15
    encoding: str = "repeat"
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    new_train_images: str = ""
    new_train_labels: str = ""
    new_test_images: str = ""
    new_test_labels: str = ""

    def synth(self, time_steps: int) -> SynthSpec:
        return SynthSpec(self.size, self.train_per_class, self.test_per_class, self.noise, time_steps,
                         self.encoding)


@dataclass(frozen=True)
class ContinualSpec:
    lam: float = 1.0
    temperature: float = 2.0
    epochs: int = 5
    threshold: float = 50.0
    calibrate: bool = True
    fid_samples: int = 2048
    k: int = 1
    similar: str = "auto"
    method: str = "both"


@dataclass(frozen=True)
class EnergySpec:
    e_sop: float = 0.9
    e_mac: float = 4.6
    samples: int = 100


@dataclass(frozen=True)
class GradcheckSpec:
    n_params: int = 200
    samples: int = 2
    step: float = 1e-5
    tolerance: float = 1e-4


@dataclass(frozen=True)
class OutputSpec:
    dir: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    topology: TopologySpec = field(default_factory=TopologySpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)
    continual: ContinualSpec = field(default_factory=ContinualSpec)
    energy: EnergySpec = field(default_factory=EnergySpec)
    gradcheck: GradcheckSpec = field(default_factory=GradcheckSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    base_dir: Path | None = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def to_text(self) -> str:
        """INI text that parses back to this config; file paths are made absolute when ``base_dir`` is set."""
        out = []
        for section in SECTIONS:
            spec = getattr(self, section)
            out.append(f"[{section}]")
            for f in fields(spec):
                value = getattr(spec, f.name)
                if value is None:
                    value = "none"
                elif (section, f.name) in _PATH_KEYS and value and self.base_dir is not None:
                    value = (Path(self.base_dir) / value).resolve()
                out.append(f"{_KEY_ALIASES.get((section, f.name), f.name)} = {value}")
            out.append("")
        return "\n".join(out)


SECTIONS = {
    "topology": TopologySpec,
    "model": ModelSpec,
    "train": TrainConfig,
    "data": DataSpec,
    "continual": ContinualSpec,
    "energy": EnergySpec,
    "gradcheck": GradcheckSpec,
    "output": OutputSpec,
}
# file key -> field name where the natural key is a Python keyword
_KEY_ALIASES = {("continual", "lam"): "lambda"}
_PATH_KEYS = {("topology", "file")} | {
    ("data", f"{prefix}{split}_{part}") for prefix in ("", "new_") for split in ("train", "test")
    for part in ("images", "labels")}


def _coerce(section: str, key: str, raw: str, default, optional: bool):
    text = raw.strip()
    if optional and text.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return lowered in ("true", "yes", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return text


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = SECTIONS[section]
        defaults = cls()
        optional = {f.name: "None" in str(f.type) for f in fields(cls)}
        names = set(optional)
        to_field = {file_key: name for (s, name), file_key in _KEY_ALIASES.items() if s == section}
        values = {}
        for key, raw in parser.items(section):
            name = to_field.get(key, key)
            if name not in names or (key == name and name in to_field.values()):
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[name] = _coerce(section, key, raw, getattr(defaults, name), optional[name])
        try:
            parts[section] = cls(**values)
        except InvalidArgumentError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    config = ExperimentConfig(**parts, base_dir=base_dir)
    validate(config)
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def validate(config: ExperimentConfig) -> None:
    if config.topology.generator not in GENERATORS:
        raise ConfigError(f"topology generator must be one of {GENERATORS}, got {config.topology.generator!r}")
    if config.data.source not in ("synth", "idx"):
        raise ConfigError(f"data source must be 'synth' or 'idx', got {config.data.source!r}")
    if config.data.encoding not in ENCODINGS:
        raise ConfigError(f"encoding must be one of {ENCODINGS}, got {config.data.encoding!r}")
    if config.data.similarity not in ("near", "far"):
        raise ConfigError(f"similarity must be 'near' or 'far', got {config.data.similarity!r}")
    if config.continual.similar not in ("auto", "true", "false"):
        raise ConfigError(f"similar must be auto, true or false, got {config.continual.similar!r}")
    if config.continual.method not in ("critical", "vanilla", "both"):
        raise ConfigError(f"method must be critical, vanilla or both, got {config.continual.method!r}")
    try:
        config.model.model_config(1, config.data.size)
    except InvalidArgumentError as exc:
        raise ConfigError(f"[model] {exc}") from exc
    if config.model.time_steps < 1:
        raise ConfigError("[model] time_steps must be >= 1")


# --- data assembly -----------------------------------------------------------

def _resolve(config: ExperimentConfig, name: str) -> Path:
    path = Path(name)
    if config.base_dir is not None and not path.is_absolute():
        path = config.base_dir / path
    return path


def _idx_split(config: ExperimentConfig, prefix: str, seed: int) -> TaskSplit:
    d = config.data
    names = [getattr(d, f"{prefix}{part}") for part in ("train_images", "train_labels", "test_images", "test_labels")]
    if not all(names):
        raise ConfigError(f"[data] idx source needs {prefix}train_images/labels and {prefix}test_images/labels")
    train_x, train_y = load_idx(_resolve(config, names[0]), _resolve(config, names[1]))
    test_x, test_y = load_idx(_resolve(config, names[2]), _resolve(config, names[3]))
    classes = int(max(train_y.max(), test_y.max())) + 1
    t = config.model.time_steps
    return TaskSplit(encode(train_x, train_y, t, d.encoding, seed, classes),
                     encode(test_x, test_y, t, d.encoding, seed + 1, classes))


def build_tasks(config: ExperimentConfig, need_new: bool = False) -> tuple[TaskSplit, TaskSplit | None]:
    """Old task split plus, for continual runs, the new one."""
    d = config.data
    if d.source == "synth":
        return synth_tasks(d.similarity, d.synth(config.model.time_steps), d.seed)
    old = _idx_split(config, "", d.seed)
    new = _idx_split(config, "new_", d.seed + 2) if need_new else None
    return old, new
