"""Desk-scale studies shared by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .continual import (ContinualResult, LwfConfig, TaskCheckpoint, calibrate_threshold, critical_path_lwf,
                        extract_features, frechet_from_moments, frozen_changes, moments, record_task_statistics,
                        vanilla_lwf)
from .data import SynthSpec, TaskSplit, make_task, synth_tasks
from .energy import energy_report
from .net import CogniSNN, ModelConfig
from .topology import DagTopology, chain, generate_er
from .training import EpochMetrics, TrainConfig, fit

TOY_SPEC = SynthSpec(size=8, train_per_class=500, test_per_class=100, noise=0.3, time_steps=4)
TOY_TRAIN = TrainConfig(lr=1e-2, epochs=6, batch_size=50, lr_schedule="cosine")
CALIBRATION_SEED_OFFSET = 1000


def er7(seed: int = 0) -> DagTopology:
    return generate_er(7, 0.6, seed)


def toy_model(topology: DagTopology, spec: SynthSpec = TOY_SPEC, c_node: int = 16, gate: str = "OR",
              seed: int = 0, classes: int = 3, task: str = "A") -> CogniSNN:
    model = CogniSNN(topology, ModelConfig(1, spec.size, c_node, gate=gate), seed=seed)
    model.add_head(task, classes)
    return model


@dataclass
class ToyResult:
    architecture: str
    seed: int
    metrics: list[EpochMetrics]
    model: CogniSNN

    def test_accuracy(self) -> list[float]:
        return [m.accuracy for m in self.metrics if m.split == "test"]

    @property
    def final(self) -> float:
        return self.test_accuracy()[-1]

    @property
    def best(self) -> float:
        return max(self.test_accuracy())


def toy_classification(topology: DagTopology, seed: int, architecture: str = "", spec: SynthSpec = TOY_SPEC,
                       train: TrainConfig = TOY_TRAIN, c_node: int = 16, gate: str = "OR",
                       task: TaskSplit | None = None) -> ToyResult:
    """Train on the 3-class strokes task drawn with ``seed``; init and shuffling share the seed."""
    task = task or make_task("strokes", spec, seed)
    model = toy_model(topology, spec, c_node, gate, seed)
    config = replace(train, seed=seed)
    result = fit(model, task.train, config, task="A", eval_sets={"test": task.test})
    return ToyResult(architecture or topology.generator, seed, result.metrics, model)


def chain7() -> DagTopology:
    return chain(7)


# --- continual ------------------------------------------------------------------

CONTINUAL_SPEC = SynthSpec(size=8, train_per_class=300, test_per_class=100, noise=0.3, time_steps=4)
CONTINUAL_OLD_TRAIN = TrainConfig(lr=1e-2, epochs=5, batch_size=50)
CONTINUAL_NEW_TRAIN = TrainConfig(lr=1e-3, epochs=4, batch_size=50)


@dataclass
class ContinualPair:
    similarity: str
    seed: int
    benchmark: float
    critical: ContinualResult
    vanilla: ContinualResult
    threshold: float
    audit: list[str] = field(default_factory=list)

    @property
    def critical_forgetting(self) -> float:
        return self.critical.final.forgetting

    @property
    def vanilla_forgetting(self) -> float:
        return self.vanilla.final.forgetting


def pretrain_old(seed: int, topology: DagTopology, spec: SynthSpec = CONTINUAL_SPEC,
                 train: TrainConfig = CONTINUAL_OLD_TRAIN, c_node: int = 16,
                 fid_samples: int = 2048) -> tuple[TaskCheckpoint, TaskSplit]:
    old = make_task("strokes", spec, seed)
    model = toy_model(topology, spec, c_node, seed=seed)
    config = replace(train, seed=seed)
    fit(model, old.train, config, task="A")
    checkpoint = TaskCheckpoint(model, {"task": "A", "seed": seed})
    record_task_statistics(checkpoint, "A", old.train, fid_samples)
    return checkpoint, old


def calibrated_threshold(checkpoint: TaskCheckpoint, seed: int, spec: SynthSpec = CONTINUAL_SPEC,
                         fid_samples: int = 2048) -> tuple[float, float]:
    """Threshold rescaled from a held-out similar pair; returns (threshold, that pair's distance)."""
    _, near = synth_tasks("near", spec, seed + CALIBRATION_SEED_OFFSET)
    distance = frechet_from_moments(*checkpoint.feature_moments("A"),
                                    *moments(extract_features(checkpoint.model, near.train, fid_samples)))
    return calibrate_threshold(distance), distance


def continual_pair(checkpoint: TaskCheckpoint, old: TaskSplit, similarity: str, seed: int,
                   threshold: float, spec: SynthSpec = CONTINUAL_SPEC,
                   train: TrainConfig = CONTINUAL_NEW_TRAIN, lwf: LwfConfig | None = None) -> ContinualPair:
    """Critical-path LwF (auto gate, K=1) against vanilla LwF on the same new task."""
    _, new = synth_tasks(similarity, spec, seed)
    lwf = lwf or LwfConfig(epochs=train.epochs)
    lwf = LwfConfig(lwf.lam, lwf.temperature, lwf.epochs, threshold, lwf.fid_samples, lwf.path_cap)
    config = replace(train, seed=seed)
    critical = critical_path_lwf(checkpoint, new.train, "B", 1, "auto", lwf, config, "A", old.test, new.test)
    vanilla = vanilla_lwf(checkpoint, new.train, "B", lwf, config, "A", old.test, new.test)
    audit = frozen_changes(checkpoint.model, critical.checkpoint.model, critical.mask)
    return ContinualPair(similarity, seed, critical.final.benchmark, critical, vanilla, threshold, audit)


# --- energy ---------------------------------------------------------------------

@dataclass
class GateComparison:
    seed: int
    or_sop: float
    add_sop: float
    or_energy: float
    add_energy: float


def gate_energy(model: CogniSNN, x: np.ndarray, seed: int, task: str = "A") -> GateComparison:
    report = energy_report(model, x, task, compare=("OR", "ADD"))
    by_gate = {c.gate: c for c in report.comparison}
    return GateComparison(seed, by_gate["OR"].sop, by_gate["ADD"].sop, by_gate["OR"].energy_pj,
                          by_gate["ADD"].energy_pj)
