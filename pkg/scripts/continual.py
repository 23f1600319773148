"""Critical-path LwF against vanilla LwF on the near and far synthetic task pairs."""

import argparse

import numpy as np

from cognisnn.experiments import calibrated_threshold, continual_pair, er7, pretrain_old


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    rows = {"near": [], "far": []}
    for seed in range(args.seeds):
        checkpoint, old = pretrain_old(seed, er7(seed))
        threshold, calib = calibrated_threshold(checkpoint, seed)
        for similarity in rows:
            pair = continual_pair(checkpoint, old, similarity, seed, threshold)
            rows[similarity].append((pair.critical_forgetting, pair.vanilla_forgetting))
            print(f"seed={seed} pair={similarity} threshold={threshold:.4f} distance={pair.critical.distance:.4f} "
                  f"similar={pair.critical.similar} path={'-'.join(map(str, pair.critical.selected_paths[0].nodes))} "
                  f"benchmark={pair.benchmark:.4f} critical_forgetting={pair.critical_forgetting:+.4f} "
                  f"vanilla_forgetting={pair.vanilla_forgetting:+.4f} frozen_changed={len(pair.audit)}")
    for similarity, values in rows.items():
        crit, van = np.mean(values, axis=0)
        print(f"{similarity}: mean forgetting critical={crit:+.4f} vanilla={van:+.4f}")


if __name__ == "__main__":
    main()
