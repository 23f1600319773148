"""Train ER-7 with each skip gate and report accuracy and spike-operation count."""

import argparse

from cognisnn.data import make_task
from cognisnn.energy import energy_report
from cognisnn.experiments import TOY_SPEC, er7, toy_classification
from cognisnn.net import GATES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gates", nargs="+", default=list(GATES))
    args = ap.parse_args()
    task = make_task("strokes", TOY_SPEC, args.seed)
    x, _ = task.test.batch(slice(0, 100))
    for gate in args.gates:
        result = toy_classification(er7(args.seed), args.seed, gate=gate, task=task)
        report = energy_report(result.model, x, "A", compare=())
        peak = max(report.stats.node_max.values())
        print(f"gate={gate} test_accuracy={result.final:.4f} sop={report.stats.sop:.0f} "
              f"energy_pj={report.energy_pj:.0f} max_node_output={peak:g}")


if __name__ == "__main__":
    main()
