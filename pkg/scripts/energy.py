"""Synaptic-operation counts and energy of OR and ADD gates on trained toy models."""

import argparse

from cognisnn.data import make_task
from cognisnn.energy import energy_report
from cognisnn.experiments import TOY_SPEC, er7, toy_classification


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--samples", type=int, default=100)
    args = ap.parse_args()
    for seed in range(args.seeds):
        task = make_task("strokes", TOY_SPEC, seed)
        result = toy_classification(er7(seed), seed, task=task)
        x, _ = task.test.batch(slice(0, args.samples))
        report = energy_report(result.model, x, "A")
        for c in report.comparison:
            print(f"seed={seed} {c.to_line()} energy_per_sample_pj={c.energy_pj / args.samples:.1f}")


if __name__ == "__main__":
    main()
