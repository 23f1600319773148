from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from cognisnn.continual import (CacheViolation, LwfConfig, SoftTargets, TaskCheckpoint, calibrate_threshold,
                                critical_parameter_paths, critical_path_lwf, distillation_loss,
                                frechet_from_moments, frozen_changes, lwf_loss, moments, record_task_statistics,
                                resolve_similarity, soft_targets, task_similarity, vanilla_lwf)
from cognisnn.data import EncodedDataset, SynthSpec, make_task, synth_tasks
from cognisnn.errors import CapacityError, InvalidArgumentError
from cognisnn.net import CogniSNN, ModelConfig
from cognisnn.tensor import Tensor, grads_of
from cognisnn.topology import Path, generate_er, rank_paths, select_critical_paths
from cognisnn.training import TrainConfig, cross_entropy_loss, fit, predict_logits

from oracles import softmax

SPEC = SynthSpec(size=8, train_per_class=20, test_per_class=10, noise=0.3, time_steps=2)
NEW_TRAIN = TrainConfig(lr=1e-3, epochs=1, batch_size=20, seed=3)


@pytest.fixture(scope="module")
def pretrained():
    old, _ = synth_tasks("near", SPEC, 0)
    model = CogniSNN(generate_er(5, 0.6, 0), ModelConfig(1, 8, 8), seed=0, heads={"A": 3})
    fit(model, old.train, TrainConfig(lr=1e-2, epochs=2, batch_size=20))
    ckpt = TaskCheckpoint(model, {"task": "A"})
    record_task_statistics(ckpt, "A", old.train)
    return ckpt, old


@pytest.fixture(scope="module")
def new_task():
    return synth_tasks("far", SPEC, 0)[1]


# loss

def test_distillation_matches_formula(rng):
    current, targets = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    want = -np.mean(np.sum(softmax(targets / 2) * np.log(softmax(current / 2)), axis=1))
    assert distillation_loss(Tensor(current), targets, 2.0).item() == pytest.approx(want, rel=1e-12)


def test_lwf_loss_composition(rng):
    new, old, targets = rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    y = np.array([0, 1, 1, 0])
    ce = cross_entropy_loss(Tensor(new), y).item()
    kd = distillation_loss(Tensor(old), targets, 2.0).item()
    got = lwf_loss(Tensor(new), y, Tensor(old), targets, LwfConfig(lam=0.7)).item()
    assert got == pytest.approx(0.7 * kd + ce, rel=1e-12)
    assert lwf_loss(Tensor(new), y, Tensor(old), targets, LwfConfig(lam=0.0)).item() == ce


@given(st.integers(0, 2**31 - 1), st.floats(0.5, 5.0))
def test_distillation_fixed_point(seed, temperature):
    targets = np.random.default_rng(seed).normal(size=(3, 4))
    t = Tensor(targets.copy(), requires_grad=True)
    loss = distillation_loss(t, targets, temperature)
    (g,) = grads_of(loss, [t])
    np.testing.assert_allclose(g, 0.0, atol=1e-12)
    p = softmax(targets / temperature)
    assert loss.item() == pytest.approx(-np.mean(np.sum(p * np.log(p), axis=1)), rel=1e-10)


@given(st.integers(0, 2**31 - 1))
def test_lwf_loss_monotone_in_lambda(seed):
    rng = np.random.default_rng(seed)
    new, old, targets = rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    y = rng.integers(0, 2, 3)
    values = [lwf_loss(Tensor(new), y, Tensor(old), targets, LwfConfig(lam=lam)).item() for lam in (0, 0.5, 1, 4)]
    assert values[0] >= 0
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_lwf_config_validation():
    for kwargs in (dict(lam=-1), dict(temperature=0), dict(epochs=-1)):
        with pytest.raises(InvalidArgumentError):
            LwfConfig(**kwargs)


# Fréchet distance

def scipy_frechet(a, b):
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))
    cross = scipy.linalg.sqrtm(ca @ cb).real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2 * cross))


@given(st.integers(0, 2**31 - 1))
def test_frechet_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    a = rng.normal(size=(200, d)) @ rng.normal(size=(d, d))
    b = rng.normal(1.0, 2.0, size=(150, d))
    assert task_similarity(a, b) == pytest.approx(scipy_frechet(a, b), rel=1e-6, abs=1e-8)


def test_frechet_one_dimensional_closed_form():
    assert frechet_from_moments(1.0, 4.0, 3.0, 9.0) == pytest.approx(4 + 4 + 9 - 2 * 6)


def test_frechet_self_and_symmetry(rng):
    a, b = rng.normal(size=(100, 4)), rng.normal(0.5, 1.5, size=(80, 4))
    assert task_similarity(a, a) == pytest.approx(0.0, abs=1e-9)
    assert task_similarity(a, b) == pytest.approx(task_similarity(b, a), rel=1e-9)
    # degenerate covariance stays finite and non-negative
    flat = np.zeros((10, 4))
    assert task_similarity(flat, flat) == 0.0


def test_moments_need_enough_samples(rng):
    with pytest.raises(InvalidArgumentError):
        moments(rng.normal(size=(4, 4)))
    assert moments(rng.normal(size=(5, 4)))[1].shape == (4, 4)


def test_calibration():
    assert calibrate_threshold(24.5) == 50.0
    assert calibrate_threshold(2.45) == pytest.approx(5.0)
    with pytest.raises(InvalidArgumentError):
        calibrate_threshold(0.0)


# soft targets

def test_soft_targets_cached_and_guarded(pretrained, new_task):
    ckpt, _ = pretrained
    cache = soft_targets(ckpt.model, new_task.train, "A")
    np.testing.assert_array_equal(cache.values, predict_logits(ckpt.model, new_task.train, "A"))
    with pytest.raises(ValueError):
        cache.values[0, 0] = 1.0
    tampered = SoftTargets(cache.values + 1, cache.digest)
    with pytest.raises(CacheViolation):
        tampered.verify()


def test_soft_targets_batch_independent(pretrained, new_task):
    ckpt, _ = pretrained
    a = soft_targets(ckpt.model, new_task.train, "A", batch_size=7).values
    b = soft_targets(ckpt.model, new_task.train, "A", batch_size=60).values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# continual runs

def test_critical_parameter_paths(pretrained):
    model = pretrained[0].model
    path = Path((0, 2, 5)) if (0, 2) in model.topology.edges else rank_paths(model.topology).paths[0]
    chosen = critical_parameter_paths(model, [path])
    for v in path.nodes:
        assert set(model.node_parameter_paths(v)) <= set(chosen)
    assert {c for c in chosen if c.startswith("edge.")} == {f"edge.{i}-{j}.gain" for i, j in path.edges}


def test_critical_run_freezes_everything_else(pretrained, new_task):
    ckpt, old = pretrained
    before = ckpt.to_bytes()
    result = critical_path_lwf(ckpt, new_task.train, "B", 1, False, LwfConfig(epochs=1), NEW_TRAIN,
                               old_eval=old.test, new_eval=new_task.test)
    assert ckpt.to_bytes() == before
    model = result.checkpoint.model
    assert frozen_changes(ckpt.model, model, result.mask) == []
    assert {"head.A.weight", "head.A.bias", "stem.conv"} <= result.mask.frozen
    trainable = set(model.params) - result.mask.frozen
    expected = set(critical_parameter_paths(model, result.selected_paths)) | {"head.B.weight", "head.B.bias"}
    assert trainable == expected
    assert any(not np.array_equal(model.params[p].data, ckpt.model.params.get(p, model.params[p]).data)
               for p in trainable if p in ckpt.model.params)
    # frozen BN layers keep their running statistics
    assert model.stats["stem"].mean.tobytes() == ckpt.model.stats["stem"].mean.tobytes()
    (low,) = select_critical_paths(rank_paths(ckpt.model.topology), 1, False)
    assert result.selected_paths == [low]
    assert len(result.records) == 1 and result.final.benchmark == result.records[0].benchmark


def test_runs_are_reproducible(pretrained, new_task):
    ckpt, old = pretrained
    a = critical_path_lwf(ckpt, new_task.train, "B", 1, True, LwfConfig(epochs=1), NEW_TRAIN, old_eval=old.test)
    b = critical_path_lwf(TaskCheckpoint.from_bytes(ckpt.to_bytes()), new_task.train, "B", 1, True,
                          LwfConfig(epochs=1), NEW_TRAIN, old_eval=old.test)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert a.losses == b.losses


def test_vanilla_trains_everything(pretrained, new_task):
    ckpt, old = pretrained
    result = vanilla_lwf(ckpt, new_task.train, "B", LwfConfig(epochs=1), NEW_TRAIN, old_eval=old.test)
    assert result.mask.frozen == frozenset()
    assert result.checkpoint.tasks == ["A", "B"]
    assert not np.array_equal(result.checkpoint.model.params["stem.conv"].data, ckpt.model.params["stem.conv"].data)


def test_zero_epochs_keeps_old_model(pretrained, new_task):
    ckpt, _ = pretrained
    result = vanilla_lwf(ckpt, new_task.train, "B", LwfConfig(epochs=0), NEW_TRAIN)
    assert result.records == []
    for p, t in ckpt.model.params.items():
        assert result.checkpoint.model.params[p].data.tobytes() == t.data.tobytes()


def test_registered_task_rejected(pretrained, new_task):
    with pytest.raises(InvalidArgumentError):
        vanilla_lwf(pretrained[0], new_task.train, "A", LwfConfig(epochs=0), NEW_TRAIN)


def test_similarity_gate_uses_threshold(pretrained, new_task):
    ckpt, _ = pretrained
    similar, distance = resolve_similarity(ckpt, new_task.train, LwfConfig(threshold=1e12))
    assert similar and distance >= 0
    assert resolve_similarity(ckpt, new_task.train, LwfConfig(threshold=distance))[0] is False
    with pytest.raises(InvalidArgumentError):
        critical_path_lwf(ckpt, new_task.train, "B", similar="maybe")


def test_checkpoint_keeps_feature_statistics(pretrained, tmp_path):
    ckpt, _ = pretrained
    ckpt.save(tmp_path / "a.ckpt")
    loaded = TaskCheckpoint.load(tmp_path / "a.ckpt")
    for got, want in zip(loaded.feature_moments("A"), ckpt.feature_moments("A")):
        assert got.tobytes() == want.tobytes()
    with pytest.raises(InvalidArgumentError):
        loaded.feature_moments("Z")
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


def test_make_task_families_distinct():
    a = make_task("strokes_shifted", SPEC, 0).train.inputs
    b = make_task("textures", SPEC, 0).train.inputs
    assert a.shape == b.shape and not np.array_equal(a, b)


def test_soft_target_of_old_training_sample(pretrained):
    ckpt, old = pretrained
    sample = old.train.subset(np.arange(3))
    want = predict_logits(ckpt.model, old.train, "A")[:3]
    np.testing.assert_allclose(soft_targets(ckpt.model, sample, "A").values, want, rtol=0, atol=1e-12)


def test_checkpoint_load_save_bit_exact(pretrained, tmp_path):
    ckpt, _ = pretrained
    ckpt.save(tmp_path / "a.ckpt")
    TaskCheckpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_large_lambda_without_epochs_keeps_old_accuracy(pretrained, new_task):
    ckpt, old = pretrained
    result = critical_path_lwf(ckpt, new_task.train, "B", 1, True, LwfConfig(lam=1e6, epochs=0), NEW_TRAIN)
    np.testing.assert_array_equal(predict_logits(result.checkpoint.model, old.test, "A"),
                                  predict_logits(ckpt.model, old.test, "A"))


def test_path_cap_and_empty_head_errors(pretrained, new_task):
    ckpt, _ = pretrained
    with pytest.raises(CapacityError):
        critical_path_lwf(ckpt, new_task.train, "B", 1, True, LwfConfig(epochs=0, path_cap=1), NEW_TRAIN)
    empty = EncodedDataset(new_task.train.inputs, new_task.train.labels, 0, "repeat")
    with pytest.raises(InvalidArgumentError):
        vanilla_lwf(ckpt, empty, "B", LwfConfig(epochs=0), NEW_TRAIN)


def test_vanilla_on_identical_task_does_not_forget(pretrained):
    ckpt, old = pretrained
    result = vanilla_lwf(ckpt, old.train, "B", LwfConfig(epochs=2), replace(NEW_TRAIN, epochs=2), old_eval=old.test)
    # one test sample is 1/30 of accuracy; allow that much noise
    assert all(r.old_accuracy >= r.benchmark - 1 / 30 - 1e-12 for r in result.records)
