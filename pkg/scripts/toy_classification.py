"""ER-7 random graph against a 7-node chain on the 3-class strokes task."""

import argparse
from dataclasses import replace

from cognisnn.experiments import TOY_TRAIN, chain7, er7, toy_classification


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=TOY_TRAIN.epochs)
    args = ap.parse_args()
    train = replace(TOY_TRAIN, epochs=args.epochs)
    wins = 0
    for seed in range(args.seeds):
        er = toy_classification(er7(seed), seed, "ER-7", train=train)
        ch = toy_classification(chain7(), seed, "chain-7", train=train)
        wins += ch.final <= er.final
        print(f"seed={seed} er_test={er.final:.4f} chain_test={ch.final:.4f} "
              f"er_curve={[round(a, 3) for a in er.test_accuracy()]}")
    print(f"chain <= ER on {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
