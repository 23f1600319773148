"""Learning without Forgetting, its critical-path variant, and the Fréchet task gate."""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import EncodedDataset
from .errors import CogniSNNError, InvalidArgumentError
from .net import CogniSNN, decode_checkpoint, edge_path, encode_checkpoint, head_paths
from .tensor import Tensor, log_softmax, no_grad
from .topology import DEFAULT_PATH_CAP, Path as GraphPath, rank_paths, select_critical_paths
from .training import (FreezeMask, Optimizer, TrainConfig, apply_update, cross_entropy_loss, evaluate,
                       predict_logits)

# Inception-feature anchors used to rescale the similarity threshold
REFERENCE_SIMILAR_FID = 24.5
REFERENCE_THRESHOLD = 50.0


@dataclass(frozen=True)
class LwfConfig:
    lam: float = 1.0
    temperature: float = 2.0
    epochs: int = 5
    threshold: float = REFERENCE_THRESHOLD
    fid_samples: int = 2048
    path_cap: int = DEFAULT_PATH_CAP

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError(f"lambda must be non-negative, got {self.lam}")
        if not self.temperature > 0:
            raise InvalidArgumentError(f"temperature must be positive, got {self.temperature}")
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be non-negative, got {self.epochs}")


class CacheViolation(CogniSNNError):
    """Cached soft targets changed after they were frozen."""


# --- checkpoint ---------------------------------------------------------------

@dataclass
class TaskCheckpoint:
    """A trained model plus what the next task needs to know about earlier ones.

    ``arrays`` holds per-task feature statistics (``<task>.feature_mean`` and
    ``<task>.feature_cov``) used by the similarity gate.
    """

    model: CogniSNN
    metadata: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def tasks(self) -> list[str]:
        return list(self.model.heads)

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self.model, self.metadata, self.arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TaskCheckpoint":
        model, metadata, arrays = decode_checkpoint(blob)
        return cls(model, metadata, arrays)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "TaskCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def feature_moments(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.arrays[f"{task}.feature_mean"], self.arrays[f"{task}.feature_cov"]
        except KeyError as exc:
            raise InvalidArgumentError(f"checkpoint has no feature statistics for task {task!r}") from exc


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- soft targets and loss ------------------------------------------------------

@dataclass(frozen=True)
class SoftTargets:
    values: np.ndarray
    digest: str

    def verify(self) -> None:
        if _digest(self.values) != self.digest:
            raise CacheViolation("soft targets were modified after caching")


def _digest(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()


def soft_targets(old_model: CogniSNN, data: EncodedDataset, task: str, batch_size: int = 100) -> SoftTargets:
    """Old-head logits of the pre-trained model on every new-task sample, computed once."""
    values = predict_logits(old_model, data, task, batch_size)
    values.setflags(write=False)
    return SoftTargets(values, _digest(values))


def distillation_loss(old_logits: Tensor, targets: np.ndarray, temperature: float) -> Tensor:
    """Cross-entropy between temperature-softened targets and softened current logits."""
    scaled = np.asarray(targets, dtype=np.float64) / temperature
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    probs = np.exp(scaled)
    probs /= probs.sum(axis=-1, keepdims=True)
    log_q = log_softmax(old_logits * (1.0 / temperature))
    return -(log_q * probs).sum(axis=-1).mean()


def lwf_loss(new_logits: Tensor, new_labels, old_logits: Tensor, targets: np.ndarray,
             config: LwfConfig) -> Tensor:
    """lambda * L_old + L_new; the regularizer is applied by the optimizer as weight decay."""
    new_term = cross_entropy_loss(new_logits, new_labels)
    if config.lam == 0:
        return new_term
    return distillation_loss(old_logits, targets, config.temperature) * config.lam + new_term


# --- Fréchet distance -----------------------------------------------------------

def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a - mu_b|^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2))."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    cross = np.sqrt(np.clip(np.linalg.eigvalsh((middle + middle.T) / 2), 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(value, 0.0)


def moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    n, d = features.shape
    if n < d + 1:
        raise InvalidArgumentError(f"need at least {d + 1} samples for {d}-dimensional features, got {n}")
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def task_similarity(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets ``[N, d]``."""
    return frechet_from_moments(*moments(features_a), *moments(features_b))


def extract_features(model: CogniSNN, data: EncodedDataset, limit: int | None = None,
                     batch_size: int = 100) -> np.ndarray:
    """Time-averaged sink features of ``model`` (eval mode) for up to ``limit`` samples."""
    n = len(data) if limit is None else min(limit, len(data))
    with no_grad():
        return np.concatenate([model.features(data.batch(slice(s, min(s + batch_size, n)))[0]).data
                               for s in range(0, n, batch_size)])


def calibrate_threshold(similar_distance: float, threshold: float = REFERENCE_THRESHOLD,
                        anchor: float = REFERENCE_SIMILAR_FID) -> float:
    """Rescale ``threshold`` so a known-similar pair lands where the reference pair did."""
    if not similar_distance > 0:
        raise InvalidArgumentError(f"calibration distance must be positive, got {similar_distance}")
    return threshold * similar_distance / anchor


def record_task_statistics(checkpoint: TaskCheckpoint, task: str, data: EncodedDataset,
                           limit: int = 2048) -> None:
    mu, cov = moments(extract_features(checkpoint.model, data, limit))
    checkpoint.arrays[f"{task}.feature_mean"] = mu
    checkpoint.arrays[f"{task}.feature_cov"] = cov


# --- continual runs ---------------------------------------------------------------

def critical_parameter_paths(model: CogniSNN, paths: list[GraphPath]) -> list[str]:
    """Both triplets of every node on the paths plus the gains of the paths' own edges."""
    chosen: list[str] = []
    for path in paths:
        for v in path.nodes:
            chosen += model.node_parameter_paths(v)
        chosen += [edge_path(i, j) for i, j in path.edges]
    return list(dict.fromkeys(chosen))


@dataclass
class ContinualRecord:
    epoch: int
    new_accuracy: float
    old_accuracy: float
    benchmark: float

    @property
    def forgetting(self) -> float:
        return self.benchmark - self.old_accuracy

    def to_line(self) -> str:
        return (f"epoch={self.epoch} target_accuracy={self.new_accuracy!r} "
                f"source_accuracy={self.old_accuracy!r} benchmark={self.benchmark!r} "
                f"forgetting={self.forgetting!r}")


@dataclass
class ContinualResult:
    checkpoint: TaskCheckpoint
    records: list[ContinualRecord]
    mask: FreezeMask
    selected_paths: list[GraphPath] = field(default_factory=list)
    similar: bool | None = None
    distance: float | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> ContinualRecord | None:
        return self.records[-1] if self.records else None

    def report(self, method: str) -> str:
        lines = [f"method={method} similar={self.similar} distance={self.distance!r} "
                 f"paths={';'.join('-'.join(map(str, p.nodes)) for p in self.selected_paths) or 'all'}"]
        lines += [r.to_line() for r in self.records]
        return "\n".join(lines) + "\n"


def frozen_changes(before: CogniSNN, after: CogniSNN, mask: FreezeMask) -> list[str]:
    """Frozen parameter paths whose values are not bit-identical across ``before``/``after``."""
    return [p for p in sorted(mask.frozen)
            if p in before.params and not np.array_equal(before.params[p].data, after.params[p].data)]


def _run_lwf(old: TaskCheckpoint, new_train: EncodedDataset, new_task: str, config: LwfConfig,
             train_config: TrainConfig, choose_trainable: Callable[[CogniSNN], list[str] | None],
             old_task: str | None, old_eval: EncodedDataset | None,
             new_eval: EncodedDataset | None) -> tuple[TaskCheckpoint, list[ContinualRecord], FreezeMask, list]:
    old_task = old_task or old.metadata.get("task") or old.tasks[0]
    if old_task not in old.model.heads:
        raise InvalidArgumentError(f"old checkpoint has no head for task {old_task!r}")
    if new_task in old.model.heads:
        raise InvalidArgumentError(f"task {new_task!r} is already registered")
    if new_train.num_classes < 1:
        raise InvalidArgumentError("new task needs at least one class")

    plus = old.model.clone()
    plus.add_head(new_task, new_train.num_classes, seed=train_config.seed)
    trainable = choose_trainable(plus)
    mask = FreezeMask() if trainable is None else FreezeMask.all_except(plus, trainable)
    eval_bn = mask.eval_bn(plus)
    targets = soft_targets(old.model, new_train, old_task)
    optimizer = Optimizer(train_config)
    rng = np.random.default_rng(train_config.seed)
    benchmark = evaluate(old.model, old_eval, old_task).accuracy if old_eval is not None else float("nan")
    records: list[ContinualRecord] = []
    losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(new_train))
        optimizer.lr = train_config.lr_at(epoch, config.epochs)
        for start in range(0, len(order), train_config.batch_size):
            index = np.sort(order[start:start + train_config.batch_size])
            x, y = new_train.batch(index)
            feats = plus.features(x, training=True, smooth=train_config.smooth_mode, eval_bn=eval_bn)
            loss = lwf_loss(plus.logits(feats, new_task), y, plus.logits(feats, old_task),
                            targets.values[index], config)
            losses.append(apply_update(plus, loss, optimizer, mask, train_config.clip_norm))
        targets.verify()
        new_acc = evaluate(plus, new_eval, new_task).accuracy if new_eval is not None else float("nan")
        old_acc = evaluate(plus, old_eval, old_task).accuracy if old_eval is not None else float("nan")
        records.append(ContinualRecord(epoch, new_acc, old_acc, benchmark))
    metadata = dict(old.metadata)
    metadata.update({"task": new_task, "previous_task": old_task, "lwf_epochs": config.epochs,
                     "lambda": config.lam, "temperature": config.temperature})
    checkpoint = TaskCheckpoint(plus, metadata, dict(old.arrays))
    return checkpoint, records, mask, losses


def resolve_similarity(old: TaskCheckpoint, new_train: EncodedDataset, config: LwfConfig,
                       old_task: str | None = None) -> tuple[bool, float]:
    """Fréchet distance of the new data to the stored old-task features, and the gate decision."""
    old_task = old_task or old.metadata.get("task") or old.tasks[0]
    mu_old, cov_old = old.feature_moments(old_task)
    mu_new, cov_new = moments(extract_features(old.model, new_train, config.fid_samples))
    distance = frechet_from_moments(mu_old, cov_old, mu_new, cov_new)
    return distance < config.threshold, distance


def critical_path_lwf(old: TaskCheckpoint, new_train: EncodedDataset, new_task: str, k: int = 1,
                      similar: bool | str = "auto", config: LwfConfig = LwfConfig(),
                      train_config: TrainConfig = TrainConfig(), old_task: str | None = None,
                      old_eval: EncodedDataset | None = None,
                      new_eval: EncodedDataset | None = None) -> ContinualResult:
    """Fine-tune only the critical paths and the new head with the LwF objective.

    ``similar="auto"`` decides the branch by comparing the Fréchet distance of
    the old model's features on the new data against ``config.threshold``.
    """
    distance = None
    if similar == "auto":
        similar, distance = resolve_similarity(old, new_train, config, old_task)
    elif not isinstance(similar, bool):
        raise InvalidArgumentError(f"similar must be True, False or 'auto', got {similar!r}")
    ranking = rank_paths(old.model.topology, config.path_cap)
    selected = select_critical_paths(ranking, k, similar)

    def choose(model: CogniSNN) -> list[str]:
        return critical_parameter_paths(model, selected) + list(head_paths(new_task))

    checkpoint, records, mask, losses = _run_lwf(old, new_train, new_task, config, train_config, choose,
                                                 old_task, old_eval, new_eval)
    checkpoint.metadata.update({"method": "critical_path_lwf", "similar": similar, "k": k,
                                "paths": ["-".join(map(str, p.nodes)) for p in selected]})
    return ContinualResult(checkpoint, records, mask, selected, similar, distance, losses)


def vanilla_lwf(old: TaskCheckpoint, new_train: EncodedDataset, new_task: str,
                config: LwfConfig = LwfConfig(), train_config: TrainConfig = TrainConfig(),
                old_task: str | None = None, old_eval: EncodedDataset | None = None,
                new_eval: EncodedDataset | None = None) -> ContinualResult:
    """LwF with every parameter trainable."""
    checkpoint, records, mask, losses = _run_lwf(old, new_train, new_task, config, train_config,
                                                 lambda model: None, old_task, old_eval, new_eval)
    checkpoint.metadata["method"] = "vanilla_lwf"
    return ContinualResult(checkpoint, records, mask, losses=losses)
