import numpy as np
import pytest

from cognisnn.data import SynthSpec, make_task
from cognisnn.errors import InvalidArgumentError, NumericError
from cognisnn.net import CogniSNN, ModelConfig
from cognisnn.tensor import Tensor, grads_of
from cognisnn.topology import generate_er
from cognisnn.training import (EpochMetrics, FreezeMask, Optimizer, TrainConfig, apply_update, cross_entropy_loss,
                               evaluate, fit, gradient_check, parameter_group, train_step)

from oracles import softmax

SPEC = SynthSpec(size=8, train_per_class=10, test_per_class=5, time_steps=2)
SMALL = ModelConfig(1, 8, 4)


def small_model(seed=0, topology=None):
    return CogniSNN(topology or generate_er(4, 0.7, 1), SMALL, seed=seed, heads={"A": 3})


def test_cross_entropy_oracle(rng):
    logits = rng.normal(size=(5, 4))
    y = np.array([0, 3, 1, 1, 2])
    want = -np.mean(np.log(softmax(logits)[np.arange(5), y]))
    assert cross_entropy_loss(Tensor(logits), y).item() == pytest.approx(want, rel=1e-12)
    t = Tensor(logits, requires_grad=True)
    (g,) = grads_of(cross_entropy_loss(t, y), [t])
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(g, (softmax(logits) - onehot) / 5, atol=1e-14)


def test_cross_entropy_errors():
    with pytest.raises(InvalidArgumentError):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0])
    with pytest.raises(InvalidArgumentError):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_sgd_step():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    opt = Optimizer(TrainConfig(optimizer="sgd", lr=0.1, momentum=0.5, weight_decay=0.0))
    opt.update(p, {"w": np.array([1.0, 1.0])})
    np.testing.assert_allclose(p["w"].data, [0.9, -2.1])
    opt.update(p, {"w": np.array([1.0, 1.0])})
    np.testing.assert_allclose(p["w"].data, [0.75, -2.25])


def test_adam_first_step_is_lr_sign():
    p = {"w": Tensor(np.array([0.0, 0.0]))}
    Optimizer(TrainConfig(lr=0.01, weight_decay=0.0)).update(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01], rtol=1e-6)


def test_cosine_schedule_values():
    cfg = TrainConfig(lr=0.2, epochs=4, lr_schedule="cosine")
    # 0.1 * (1 + cos(k * pi / 4)) for k = 0..3
    want = [0.2, 0.17071067811865476, 0.1, 0.029289321881345254]
    np.testing.assert_allclose([cfg.lr_at(e) for e in range(1, 5)], want, rtol=1e-15)
    assert TrainConfig(lr=0.2, epochs=4).lr_at(4) == 0.2
    assert cfg.lr_at(2, total=2) == pytest.approx(0.1)


def test_fit_applies_schedule_per_epoch():
    task = make_task("strokes", SPEC, 0)
    seen = []

    def step(model, x, y, index, optimizer):
        seen.append(optimizer.lr)
        return 0.0, np.zeros((len(y), 3))

    cfg = TrainConfig(lr=0.2, epochs=4, batch_size=len(task.train), lr_schedule="cosine")
    fit(small_model(), task.train, cfg, step_fn=step)
    assert seen == [cfg.lr_at(e) for e in range(1, 5)]


@pytest.mark.parametrize("kwargs", [dict(optimizer="rmsprop"), dict(lr=-1.0), dict(batch_size=0), dict(epochs=-1),
                                    dict(lr_schedule="step")])
def test_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        TrainConfig(**kwargs)


def test_zero_lr_leaves_parameters():
    task = make_task("strokes", SPEC, 0)
    model = small_model()
    before = {p: t.data.copy() for p, t in model.params.items()}
    fit(model, task.train, TrainConfig(lr=0.0, weight_decay=0.0, epochs=1, batch_size=10))
    assert all(np.array_equal(model.params[p].data, before[p]) for p in before)


def test_zero_epochs_is_noop():
    task = make_task("strokes", SPEC, 0)
    model = small_model()
    before = model.clone()
    assert fit(model, task.train, TrainConfig(epochs=0)).metrics == []
    assert all(np.array_equal(model.params[p].data, before.params[p].data) for p in model.params)


def test_frozen_parameters_bit_identical():
    task = make_task("strokes", SPEC, 0)
    model = small_model()
    keep = [p for p in model.params if p.startswith("head.") or p.startswith("node.3")]
    mask = FreezeMask.all_except(model, keep)
    before = {p: t.data.copy() for p, t in model.params.items()}
    stem_stats = model.stats["stem"].mean.copy()
    fit(model, task.train, TrainConfig(epochs=1, batch_size=10, lr=0.05), mask)
    for p in model.params:
        same = model.params[p].data.tobytes() == before[p].tobytes()
        assert same == (p in mask.frozen), p
    # frozen BN layers keep their running statistics
    assert model.stats["stem"].mean.tobytes() == stem_stats.tobytes()


def test_freeze_mask_unknown_path():
    with pytest.raises(InvalidArgumentError):
        FreezeMask.all_except(small_model(), ["node.99.t1.conv"])


def test_eval_bn_needs_both_affine_parameters():
    model = small_model()
    mask = FreezeMask(frozenset({"stem.bn.gamma", "node.0.t1.bn.gamma", "node.0.t1.bn.beta"}))
    assert mask.eval_bn(model) == {"node.0.t1"}


def test_fit_is_deterministic():
    task = make_task("strokes", SPEC, 1)
    config = TrainConfig(epochs=2, batch_size=8, seed=5)
    a, b = small_model(), small_model()
    ra = fit(a, task.train, config, eval_sets={"test": task.test})
    rb = fit(b, task.train, config, eval_sets={"test": task.test})
    assert [m.to_line() for m in ra.metrics] == [m.to_line() for m in rb.metrics]
    assert all(a.params[p].data.tobytes() == b.params[p].data.tobytes() for p in a.params)


def test_training_reduces_loss():
    task = make_task("strokes", SynthSpec(8, 100, 10, noise=0.3, time_steps=4), 0)
    model = CogniSNN(generate_er(5, 0.6, 0), ModelConfig(1, 8, 16), seed=0, heads={"A": 3})
    before = evaluate(model, task.train)
    fit(model, task.train, TrainConfig(epochs=3, batch_size=30, lr=1e-2))
    after = evaluate(model, task.train)
    assert after.loss < before.loss and after.accuracy > before.accuracy


def test_non_finite_loss_names_parameter():
    task = make_task("strokes", SPEC, 0)
    model = small_model()
    model.params["head.A.bias"].data[0] = np.nan
    with pytest.raises(NumericError) as info:
        train_step(model, task.train.batch(slice(0, 4)), TrainConfig())
    assert info.value.path == "head.A.bias"


def test_apply_update_clips():
    model = small_model()
    w = model.params["head.A.bias"]
    w.data[:] = 0
    loss = (w * Tensor(np.array([1e6, 0, 0]))).sum()
    opt = Optimizer(TrainConfig(optimizer="sgd", lr=1.0, momentum=0.0, weight_decay=0.0))
    apply_update(model, loss, opt, FreezeMask.all_except(model, ["head.A.bias"]), clip_norm=2.0)
    np.testing.assert_allclose(w.data, [-2.0, 0, 0])


def test_gradient_check_small_network(rng):
    model = small_model(topology=generate_er(4, 0.7, 3))
    for p, t in model.params.items():
        if p.endswith("bn.beta"):
            t.data[:] = rng.uniform(0.3, 1.0, t.shape)
    task = make_task("strokes", SPEC, 0)
    report = gradient_check(model, task.train.batch(slice(0, 2)), n_params=60)
    assert report.checked >= 60
    assert report.passed(1e-4), report.worst
    assert set(report.group_errors) >= {"stem.conv", "node.t1.conv", "node.t2.bn.gamma", "head.weight"}


def test_gradient_check_restores_stats():
    model = small_model()
    before = model.stats["stem"].mean.copy()
    gradient_check(model, make_task("strokes", SPEC, 0).train.batch(slice(0, 2)), n_params=5)
    assert model.stats["stem"].mean.tobytes() == before.tobytes()


def test_parameter_group_names():
    assert parameter_group("node.12.t2.bn.gamma") == "node.t2.bn.gamma"
    assert parameter_group("edge.3-5.gain") == "edge.gain"
    assert parameter_group("head.B.weight") == "head.weight"
    assert parameter_group("stem.conv") == "stem.conv"


def test_epoch_metrics_line_round_trip():
    m = EpochMetrics(3, "test", 0.1234567890123, 0.98, 0.05)
    assert EpochMetrics.from_line(m.to_line()) == m
