"""Command-line harness: ``cognisnn <command> --config FILE --out DIR``.

Every command writes its artifacts atomically under the output directory and
finishes with ``manifest.txt``: the command, the sha256 of the effective
configuration (saved alongside as ``config.ini``), the seeds, and a git-style
blob sha1 per output. ``reproduce`` re-executes a manifest and compares hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path

from .config import ExperimentConfig, build_tasks, config_hash, load_config, parse_config
from .continual import (ContinualResult, LwfConfig, TaskCheckpoint, atomic_write, calibrate_threshold,
                        critical_path_lwf, extract_features, frechet_from_moments, frozen_changes, moments,
                        record_task_statistics, vanilla_lwf)
from .data import synth_tasks
from .energy import energy_report
from .errors import CogniSNNError, ConfigError, FormatError, NumericError
from .net import CogniSNN
from .topology import DEFAULT_PATH_CAP, DagTopology, rank_paths
from .training import evaluate, fit, gradient_check, parameter_group

COMMANDS = ("generate-graph", "train", "eval", "paths", "continual", "energy", "gradcheck")
OLD_TASK = "A"
NEW_TASK = "B"
# seed offset for the held-out similar pair used to calibrate the similarity threshold
CALIBRATION_SEED_OFFSET = 1000


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _bytes(value: bytes | str) -> bytes:
    return value.encode("utf-8") if isinstance(value, str) else value


class Run:
    """Collects a command's outputs, then writes them (write-once) plus the manifest."""

    def __init__(self, command: str, config: ExperimentConfig, out: Path, checkpoint: Path | None):
        self.command = command
        self.config = config
        self.out = out
        self.checkpoint = checkpoint
        self.outputs: dict[str, bytes] = {"config.ini": config.to_text().encode("utf-8")}
        self.notes: list[str] = []

    def add(self, name: str, value: bytes | str) -> None:
        self.outputs[name] = _bytes(value)

    def manifest(self) -> str:
        cfg = self.config
        lines = [
            f"command {self.command}",
            f"config_sha256 {config_hash(self.outputs['config.ini'].decode('utf-8'))}",
            f"seed.train {cfg.train.seed}",
            f"seed.topology {cfg.topology.seed}",
            f"seed.data {cfg.data.seed}",
        ]
        if self.checkpoint is not None:
            blob = self.checkpoint.read_bytes()
            lines.append(f"input_checkpoint {self.checkpoint.resolve()} {git_blob_sha1(blob)}")
        lines += [f"output {name} {git_blob_sha1(data)}" for name, data in sorted(self.outputs.items())]
        lines += [f"note {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def commit(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        taken = [n for n in list(self.outputs) + ["manifest.txt"] if (self.out / n).exists()]
        if taken:
            raise ConfigError(f"output directory {self.out} already holds {taken}; outputs are write-once")
        for name, data in self.outputs.items():
            atomic_write(self.out / name, data)
        atomic_write(self.out / "manifest.txt", self.manifest())


def parse_manifest(text: str) -> dict:
    info: dict = {"outputs": {}, "notes": []}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        if key == "output":
            name, digest = rest.rsplit(" ", 1)
            info["outputs"][name] = digest
        elif key == "input_checkpoint":
            path, digest = rest.rsplit(" ", 1)
            info["checkpoint"] = (path, digest)
        elif key == "note":
            info["notes"].append(rest)
        else:
            info[key] = rest
    if "command" not in info or "config_sha256" not in info:
        raise FormatError("manifest lacks command or config_sha256", 0)
    return info


# --- shared steps ---------------------------------------------------------------

def _topology(config: ExperimentConfig) -> DagTopology:
    return config.topology.build(config.base_dir)


def _new_model(config: ExperimentConfig, topology: DagTopology, sample_shape: tuple) -> CogniSNN:
    channels, size = sample_shape[1], sample_shape[2]
    if sample_shape[2] != sample_shape[3]:
        raise ConfigError(f"inputs must be square, got {sample_shape[2]}x{sample_shape[3]}")
    return CogniSNN(topology, config.model.model_config(channels, size), seed=config.train.seed)


def _train_old(config: ExperimentConfig, run: Run) -> tuple[TaskCheckpoint, object, object]:
    old, new = build_tasks(config, need_new=run.command == "continual")
    model = _new_model(config, _topology(config), old.train.inputs.shape[1:])
    model.add_head(OLD_TASK, old.train.num_classes)
    result = fit(model, old.train, config.train, task=OLD_TASK, eval_sets={"test": old.test})
    checkpoint = TaskCheckpoint(model, {"task": OLD_TASK, "train": asdict(config.train)})
    record_task_statistics(checkpoint, OLD_TASK, old.train, config.continual.fid_samples)
    run.add("metrics.txt", "".join(m.to_line() + "\n" for m in result.metrics))
    return checkpoint, old, new


def _load_checkpoint(path: Path | None) -> TaskCheckpoint | None:
    return None if path is None else TaskCheckpoint.load(path)


# --- commands ---------------------------------------------------------------------

def cmd_generate_graph(config: ExperimentConfig, run: Run) -> int:
    run.add("topology.txt", _topology(config).to_text())
    return 0


def cmd_paths(config: ExperimentConfig, run: Run) -> int:
    ckpt = _load_checkpoint(run.checkpoint)
    topology = ckpt.model.topology if ckpt else _topology(config)
    ranking = rank_paths(topology, DEFAULT_PATH_CAP)
    scores = [f"node {v} {ranking.node_scores[v]!r}" for v in sorted(ranking.node_scores)]
    scores += [f"edge {i}-{j} {ranking.edge_scores[(i, j)]!r}" for i, j in sorted(ranking.edge_scores)]
    run.add("topology.txt", topology.to_text())
    run.add("ranking.txt", ranking.to_text())
    run.add("betweenness.txt", "\n".join(scores) + "\n")
    return 0


def cmd_train(config: ExperimentConfig, run: Run) -> int:
    checkpoint, _, _ = _train_old(config, run)
    run.add("topology.txt", checkpoint.model.topology.to_text())
    run.add("checkpoint.ckpt", checkpoint.to_bytes())
    return 0


def cmd_eval(config: ExperimentConfig, run: Run) -> int:
    ckpt = _load_checkpoint(run.checkpoint)
    if ckpt is None:
        raise ConfigError("eval needs --checkpoint")
    old, new = build_tasks(config, need_new=NEW_TASK in ckpt.model.heads)
    lines = []
    for task in ckpt.tasks:
        split = {OLD_TASK: old, NEW_TASK: new}.get(task)
        if split is None:
            raise ConfigError(f"no dataset configured for task {task!r}")
        m = evaluate(ckpt.model, split.test, task)
        lines.append(replace(m, split=f"{task}.test").to_line())
    run.add("metrics.txt", "\n".join(lines) + "\n")
    return 0


def _continual_threshold(config: ExperimentConfig, ckpt: TaskCheckpoint, run: Run) -> float:
    spec = config.continual
    if not spec.calibrate:
        return spec.threshold
    if config.data.source != "synth":
        run.notes.append("calibration skipped: needs the synthetic similar pair")
        return spec.threshold
    d = config.data
    _, near = synth_tasks("near", d.synth(config.model.time_steps), d.seed + CALIBRATION_SEED_OFFSET)
    mu_old, cov_old = ckpt.feature_moments(OLD_TASK)
    distance = frechet_from_moments(mu_old, cov_old,
                                    *moments(extract_features(ckpt.model, near.train, spec.fid_samples)))
    threshold = calibrate_threshold(distance, spec.threshold)
    run.notes.append(f"calibration similar_distance={distance!r} threshold={threshold!r}")
    return threshold


def cmd_continual(config: ExperimentConfig, run: Run) -> int:
    ckpt = _load_checkpoint(run.checkpoint)
    if ckpt is None:
        ckpt, old, new = _train_old(config, run)
        run.add("checkpoint.old.ckpt", ckpt.to_bytes())
    else:
        old, new = build_tasks(config, need_new=True)
    spec = config.continual
    lwf = LwfConfig(spec.lam, spec.temperature, spec.epochs, _continual_threshold(config, ckpt, run),
                    spec.fid_samples)
    similar = {"auto": "auto", "true": True, "false": False}[spec.similar]
    results: list[tuple[str, ContinualResult]] = []
    if spec.method in ("critical", "both"):
        results.append(("critical_path_lwf", critical_path_lwf(
            ckpt, new.train, NEW_TASK, spec.k, similar, lwf, config.train, OLD_TASK, old.test, new.test)))
    if spec.method in ("vanilla", "both"):
        results.append(("vanilla_lwf", vanilla_lwf(ckpt, new.train, NEW_TASK, lwf, config.train, OLD_TASK,
                                                   old.test, new.test)))
    report, audit = [], []
    for name, result in results:
        report.append(result.report(name))
        changed = frozen_changes(ckpt.model, result.checkpoint.model, result.mask)
        audit.append(f"method={name} frozen={len(result.mask.frozen)} changed={len(changed)} "
                     f"paths={','.join(changed) or '-'}")
        run.add(f"checkpoint.{name}.ckpt", result.checkpoint.to_bytes())
        if changed:
            raise NumericError(f"{name} modified frozen parameters", changed[0])
    run.add("continual_report.txt", "\n".join(report))
    run.add("audit.txt", "\n".join(audit) + "\n")
    return 0


def cmd_energy(config: ExperimentConfig, run: Run) -> int:
    ckpt = _load_checkpoint(run.checkpoint)
    if ckpt is None:
        ckpt, old, _ = _train_old(config, run)
        run.add("checkpoint.ckpt", ckpt.to_bytes())
    else:
        old, _ = build_tasks(config)
    task = OLD_TASK if OLD_TASK in ckpt.model.heads else ckpt.tasks[0]
    x, _ = old.test.batch(slice(0, config.energy.samples))
    report = energy_report(ckpt.model, x, task, config.energy.e_sop, config.energy.e_mac)
    run.add("energy.txt", report.to_text())
    return 0


def cmd_gradcheck(config: ExperimentConfig, run: Run) -> int:
    ckpt = _load_checkpoint(run.checkpoint)
    old, _ = build_tasks(config)
    if ckpt is None:
        model = _new_model(config, _topology(config), old.train.inputs.shape[1:])
        model.add_head(OLD_TASK, old.train.num_classes)
    else:
        model = ckpt.model
    spec = config.gradcheck
    task = OLD_TASK if OLD_TASK in model.heads else next(iter(model.heads))
    report = gradient_check(model, old.train.batch(slice(0, spec.samples)), task, spec.n_params,
                            spec.step, config.train.seed)
    lines = [f"checked={report.checked} max_rel_error={report.max_rel_error!r} tolerance={spec.tolerance!r} "
             f"passed={report.passed(spec.tolerance)}"]
    lines += [f"group={g} max_rel_error={e!r}" for g, e in sorted(report.group_errors.items())]
    if report.worst is not None:
        path, index, analytic, numeric = report.worst
        lines.append(f"worst={path}{list(index)} analytic={analytic!r} numeric={numeric!r}")
    run.add("gradcheck.txt", "\n".join(lines) + "\n")
    if not report.passed(spec.tolerance):
        run.commit()
        raise NumericError(f"gradient check failed: {report.max_rel_error:.3g} >= {spec.tolerance}",
                           parameter_group(report.worst[0]) if report.worst else "?")
    return 0


HANDLERS = {
    "generate-graph": cmd_generate_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "paths": cmd_paths,
    "continual": cmd_continual,
    "energy": cmd_energy,
    "gradcheck": cmd_gradcheck,
}


def execute(command: str, config: ExperimentConfig, out: Path, checkpoint: Path | None = None) -> Run:
    run = Run(command, config, out, checkpoint)
    HANDLERS[command](config, run)
    run.commit()
    return run


def reproduce(manifest_path: Path, out: Path) -> tuple[Run, list[str]]:
    """Re-run the manifest's command from its saved config; returns the outputs whose hash differs."""
    manifest_path = Path(manifest_path)
    info = parse_manifest(manifest_path.read_text())
    config_path = manifest_path.parent / "config.ini"
    text = config_path.read_text()
    if config_hash(text) != info["config_sha256"]:
        raise FormatError(f"{config_path} does not match the manifest's config hash", 0)
    checkpoint = None
    if "checkpoint" in info:
        checkpoint = Path(info["checkpoint"][0])
        if git_blob_sha1(checkpoint.read_bytes()) != info["checkpoint"][1]:
            raise FormatError(f"input checkpoint {checkpoint} changed since the original run", 0)
    config = parse_config(text, manifest_path.parent)
    run = execute(info["command"], config, out, checkpoint)
    fresh = {name: git_blob_sha1(data) for name, data in run.outputs.items()}
    mismatched = sorted(n for n in set(fresh) | set(info["outputs"]) if fresh.get(n) != info["outputs"].get(n))
    return run, mismatched


# --- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cognisnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="experiment config (defaults built in if omitted)")
        p.add_argument("--out", type=Path, help="output directory (else [output] dir)")
        p.add_argument("--seed", type=int, help="overrides [train] seed")
        p.add_argument("--smooth-mode", action="store_true", help="train through the surrogate primitive")
        p.add_argument("--checkpoint", type=Path, help="start from a saved checkpoint")
    p = sub.add_parser("reproduce", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _error_record(exc: BaseException, command: str | None, out: Path | None) -> int:
    if isinstance(exc, CogniSNNError):
        code = exc.exit_code
    elif isinstance(exc, (OSError, ValueError)):
        code = 3
    else:
        code = 1
    record = {"command": command, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, FormatError):
        record["offset"] = exc.offset
    if isinstance(exc, NumericError):
        record["parameter"] = exc.path
    if code == 1:
        record["traceback"] = traceback.format_exc()
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            atomic_write(out / "error.json", text + "\n")
        except OSError:
            pass
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out
    try:
        if args.command == "reproduce":
            run, mismatched = reproduce(args.manifest, out)
            for name in mismatched:
                print(f"hash mismatch: {name}", file=sys.stderr)
            print(f"reproduced {len(run.outputs) - len(mismatched)}/{len(run.outputs)} outputs")
            return 4 if mismatched else 0
        config = load_config(args.config) if args.config else ExperimentConfig(base_dir=Path.cwd())
        if args.seed is not None:
            config = config.with_seed(args.seed)
        if args.smooth_mode:
            config = replace(config, train=replace(config.train, smooth_mode=True))
        if out is None:
            if not config.output.dir:
                raise ConfigError("no output directory: pass --out or set [output] dir")
            out = Path(config.output.dir)
        run = execute(args.command, config, out, args.checkpoint)
        print(f"wrote {len(run.outputs) + 1} files to {out}")
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        return _error_record(exc, args.command, out)


if __name__ == "__main__":
    sys.exit(main())
