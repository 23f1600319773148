"""End-to-end acceptance checks, one test per criterion; each prints a pass/fail line."""

import math

import numpy as np
import pytest

from cognisnn.cli import main, parse_manifest
from cognisnn.energy import energy_report
from cognisnn.experiments import (TOY_SPEC, calibrated_threshold, chain7, continual_pair, er7, pretrain_old,
                                  toy_classification)
from cognisnn.data import make_task
from cognisnn.net import CogniSNN, ModelConfig, triplet_prefixes
from cognisnn.tensor import grads_of, no_grad
from cognisnn.topology import chain, edge_betweenness, generate_er, generate_ws, node_betweenness, rank_paths
from cognisnn.topology import select_critical_paths
from cognisnn.training import cross_entropy_loss, gradient_check

from oracles import brute_betweenness

SEEDS = range(5)


def random_case(seed, gate="OR"):
    rng = np.random.default_rng(seed)
    if seed % 2:
        n = int(rng.integers(5, 13))
        topology = generate_ws(n, 2 * int(rng.integers(1, (n - 1) // 2 + 1)), float(rng.uniform()), seed)
    else:
        topology = generate_er(int(rng.integers(2, 13)), float(rng.uniform(0.2, 0.9)), seed)
    model = CogniSNN(topology, ModelConfig(1, 8, 4, gate=gate, eta=int(rng.choice([1, 4, 32]))), seed=seed)
    for path, t in model.params.items():
        if path.endswith("bn.beta"):
            t.data[:] = rng.uniform(-0.5, 1.5, t.shape)
        elif path.startswith("edge."):
            t.data[...] = rng.normal()
    x = rng.uniform(0, 1, (int(rng.integers(1, 5)), 2, 1, 8, 8))
    return model, x, rng


def run(model, x, training):
    record = {}
    with no_grad():
        model.features(x, training=training, record=record)
    return record


def test_criterion_01_spike_form(acceptance):
    bad = []
    for seed in range(200):
        model, x, rng = random_case(seed)
        record = run(model, x, training=bool(seed % 3))
        if any(not set(np.unique(record[v]["out"])) <= {0.0, 1.0} for v in range(model.topology.n)):
            bad.append(seed)
    model = CogniSNN(chain(3), ModelConfig(1, 8, 4, gate="ADD"), seed=0)
    for path, t in model.params.items():
        if path.endswith("bn.beta"):
            t.data[:] = 1.0
    peak = max(run(model, np.ones((3, 1, 1, 8, 8)), False)[v]["out"].max() for v in range(3))
    ok = not bad and peak > 1
    assert acceptance(1, ok, f"OR non-binary cases {len(bad)}/200; ADD peak node output {peak:g}")


def test_criterion_02_identity_mapping(acceptance):
    failures = 0
    for seed in range(50):
        model, x, _ = random_case(1000 + seed)
        for v in range(model.topology.n):
            second = triplet_prefixes(v)[1]
            model.params[f"{second}.bn.gamma"].data[:] = 0.0
            model.params[f"{second}.bn.beta"].data[:] = 0.0
        record = run(model, x, training=bool(seed % 2))
        failures += any(record[v]["out"].tobytes() != record[v]["o1"].tobytes() for v in range(model.topology.n))
    assert acceptance(2, failures == 0, f"node output != O1 in {failures}/50 cases")


def identity_chain(depth):
    """Chain whose every ResNode passes binary spike trains through unchanged."""
    model = CogniSNN(chain(depth), ModelConfig(1, 8, 4, eta=32), seed=0, heads={"A": 3})
    centre = np.zeros((4, 4, 3, 3))
    centre[np.arange(4), np.arange(4), 1, 1] = 1.0
    for v in range(depth):
        first, second = triplet_prefixes(v)
        model.params[f"{first}.conv"].data[:] = centre
        model.params[f"{first}.bn.gamma"].data[:] = 2.5
        model.params[f"{first}.bn.beta"].data[:] = 0.0
        model.stats[first].mean[:] = 0.0
        model.stats[first].var[:] = 1.0 - 1e-5
        model.params[f"{second}.bn.gamma"].data[:] = 0.0
        model.params[f"{second}.bn.beta"].data[:] = 0.0
    for path, t in model.params.items():
        if path.startswith("edge."):
            t.data[...] = 4.0
        elif path == "stem.bn.beta":
            t.data[:] = 1.5
    return model


def test_criterion_03_depth_40(acceptance):
    x = np.random.default_rng(0).uniform(0, 1, (4, 2, 1, 8, 8))
    # (a) spike trains pass 40 exact-identity ResNodes untouched
    record = run(identity_chain(40), x, training=False)
    stem = record["stem"]
    unchanged = stem.any() and all(record[v]["out"].tobytes() == stem.tobytes() for v in range(40))
    # (b) identity-mapped nodes (triplet 2 zeroed), trained-mode BN, smooth surrogate forward
    model = CogniSNN(chain(40), ModelConfig(1, 8, 4, eta=32), seed=0, heads={"A": 3})
    for v in range(40):
        second = triplet_prefixes(v)[1]
        model.params[f"{second}.bn.gamma"].data[:] = 0.0
        model.params[f"{second}.bn.beta"].data[:] = 0.0
    record = run(model, x, training=True)
    mapped = all(record[v]["out"].tobytes() == record[v]["o1"].tobytes() for v in range(40))
    alive = record[39]["out"].mean()
    logits = model.forward(x, "A", training=True, smooth=True)
    (g,) = grads_of(cross_entropy_loss(logits, np.array([0, 1])), [model.params["stem.conv"]])
    norm = float(np.linalg.norm(g))
    ok = unchanged and mapped and alive > 0 and 1e-6 <= norm <= 1e6
    assert acceptance(3, ok, f"spikes unchanged through 40 nodes={unchanged}; identity-mapped chain out==O1="
                             f"{mapped}, node-40 rate {alive:.3f}, smooth stem gradient norm {norm:.3e}")


def test_criterion_04_gradient_fidelity(acceptance):
    model = CogniSNN(er7(0), ModelConfig(1, 8, 8), seed=0, heads={"A": 3})
    task = make_task("strokes", TOY_SPEC, 0)
    x, y = task.train.batch(slice(0, 2))
    report = gradient_check(model, (x, y), "A", n_params=200)
    ok = report.checked >= 200 and report.passed(1e-4)
    assert acceptance(4, ok, f"max relative error {report.max_rel_error:.2e} over {report.checked} parameters "
                             f"(T={x.shape[0]}, C_node=8)")


def test_criterion_05_betweenness_oracle(acceptance):
    worst, inexact = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(50_000 + seed)
        t = generate_er(int(rng.integers(2, 13)), float(rng.uniform(0.15, 0.8)), seed)
        node, edge = brute_betweenness(t.n, t.edges)
        got_node, got_edge = node_betweenness(t), edge_betweenness(t)
        worst = max([worst] + [abs(got_node[v] - node[v]) for v in range(t.n)]
                    + [abs(got_edge[e] - edge[e]) for e in t.edges])
        ranking = rank_paths(t)
        for p, s in zip(ranking.paths, ranking.scores):
            want = math.fsum([ranking.node_scores[v] for v in p.nodes] + [ranking.edge_scores[e] for e in p.edges])
            inexact += s != want
    ok = worst <= 1e-9 and inexact == 0
    assert acceptance(5, ok, f"max deviation from brute force {worst:.1e}; path sums not exact {inexact}")


@pytest.fixture(scope="module")
def toy_runs():
    runs = {}
    for seed in SEEDS:
        task = make_task("strokes", TOY_SPEC, seed)
        runs[seed] = (toy_classification(er7(seed), seed, "ER-7", task=task),
                      toy_classification(chain7(), seed, "chain-7", task=task), task)
    return runs


def test_criterion_06_toy_classification(acceptance, toy_runs):
    er = [toy_runs[s][0].final for s in SEEDS]
    ch = [toy_runs[s][1].final for s in SEEDS]
    epochs = len(toy_runs[0][0].test_accuracy())
    wins = sum(c <= e for c, e in zip(ch, er))
    ok = min(er) >= 0.95 and wins >= 3 and epochs <= 30
    assert acceptance(6, ok, f"ER-7 final test accuracy {[round(a, 3) for a in er]} after {epochs} epochs; "
                             f"chain {[round(a, 3) for a in ch]}; chain <= ER on {wins}/5 seeds")


def test_criterion_07_continual_direction(acceptance):
    forgetting = {"near": [], "far": []}
    gate_ok, audit_ok = True, True
    for seed in SEEDS:
        checkpoint, old = pretrain_old(seed, er7(seed))
        threshold, _ = calibrated_threshold(checkpoint, seed)
        for similarity in forgetting:
            pair = continual_pair(checkpoint, old, similarity, seed, threshold)
            forgetting[similarity].append((pair.critical_forgetting, pair.vanilla_forgetting))
            gate_ok &= pair.critical.similar == (similarity == "near")
            audit_ok &= not pair.audit
    means = {k: np.mean(v, axis=0) for k, v in forgetting.items()}
    ok = gate_ok and audit_ok and all(m[0] < m[1] for m in means.values())
    detail = "; ".join(f"{k} forgetting critical {m[0]:+.3f} vs vanilla {m[1]:+.3f}" for k, m in means.items())
    assert acceptance(7, ok, f"{detail}; gate branch correct={gate_ok}; frozen audit clean={audit_ok}")


def test_criterion_08_definition_2_branches(acceptance):
    wrong = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ranking = rank_paths(generate_er(int(rng.integers(3, 11)), float(rng.uniform(0.3, 0.8)), 70_000 + seed))
        (hi,) = select_critical_paths(ranking, 1, True)
        (lo,) = select_critical_paths(ranking, 1, False)
        score = dict(zip(ranking.paths, ranking.scores))
        wrong += score[hi] != max(ranking.scores) or score[lo] != min(ranking.scores)
    assert acceptance(8, wrong == 0, f"wrong branch in {wrong}/100 rankings")


def test_criterion_09_energy_ordering(acceptance, toy_runs):
    rows = []
    for seed in SEEDS:
        model, task = toy_runs[seed][0].model, toy_runs[seed][2]
        x, _ = task.test.batch(slice(0, 100))
        by_gate = {c.gate: c for c in energy_report(model, x, "A").comparison}
        rows.append((by_gate["OR"].sop, by_gate["ADD"].sop))
    wins = sum(add >= or_ for or_, add in rows)
    assert acceptance(9, wins >= 4, f"ADD SOP >= OR SOP on {wins}/5 seeds; "
                                    f"ratios {[round(a / o, 3) for o, a in rows]}")


def test_criterion_10_manifest_rerun(acceptance, tmp_path):
    (tmp_path / "c.ini").write_text("[model]\nc_node = 8\ntime_steps = 2\n[train]\nepochs = 1\nbatch_size = 30\n"
                                    "[data]\ntrain_per_class = 20\ntest_per_class = 10\n[continual]\nepochs = 1\n"
                                    "fid_samples = 60\ncalibrate = false\n[energy]\nsamples = 10\n")
    mismatched = []
    for command in ("train", "paths", "energy", "continual"):
        first = tmp_path / command
        assert main([command, "--config", str(tmp_path / "c.ini"), "--out", str(first)]) == 0
        assert main(["reproduce", str(first / "manifest.txt"), "--out", str(tmp_path / f"{command}.again")]) in (0, 4)
        want = parse_manifest((first / "manifest.txt").read_text())["outputs"]
        got = parse_manifest((tmp_path / f"{command}.again" / "manifest.txt").read_text())["outputs"]
        mismatched += [f"{command}/{name}" for name in set(want) | set(got) if want.get(name) != got.get(name)]
    assert acceptance(10, not mismatched, f"reran train/paths/energy/continual from manifests; "
                                          f"mismatched hashes {sorted(mismatched) or 'none'}")
