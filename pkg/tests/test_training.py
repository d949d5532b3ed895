import numpy as np
import pytest

from nsfx.data import DatasetSpec, load_datasets
from nsfx.errors import DivergedError, InvalidInputError
from nsfx.losses import HeadParams, NoiseSpec
from nsfx.network import Network
from nsfx.training import (
    METRIC_FIELDS,
    LRSchedule,
    TrainConfig,
    batches,
    decays,
    evaluate,
    lr_at,
    sgd_step,
    train,
)
from nsfx.numerics import Rng

TOY_LAYERS = ("dense(2, 16)", "prelu(16)")


def toy_config(**kw):
    base = dict(dataset=DatasetSpec(kind="synthetic", n_per_class=100, test_per_class=200, dim=2, separation=4.0),
                layers=TOY_LAYERS, batch_size=32, total_iterations=200, base_lr=0.05, pbar_interval=20,
                dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_hand_iteration():
    p = {"w.weight": np.array([1.0])}
    v = {"w.weight": np.array([0.0])}
    g = {"w.weight": np.array([0.5])}
    sgd_step(p, g, v, lr=0.1, momentum=0.9)
    assert v["w.weight"][0] == pytest.approx(-0.05, abs=1e-15)
    assert p["w.weight"][0] == pytest.approx(0.95, abs=1e-15)
    sgd_step(p, g, v, lr=0.1, momentum=0.9)
    assert v["w.weight"][0] == pytest.approx(-0.095, abs=1e-15)
    assert p["w.weight"][0] == pytest.approx(0.855, abs=1e-15)


def test_sgd_vanilla_and_zero_gradient():
    p = {"a.weight": np.array([2.0, -1.0])}
    v = {"a.weight": np.zeros(2)}
    sgd_step(p, {"a.weight": np.array([1.0, 4.0])}, v, lr=0.5)
    np.testing.assert_array_equal(p["a.weight"], [1.5, -3.0])
    p = {"a.weight": np.array([2.0])}
    sgd_step(p, {"a.weight": np.zeros(1)}, {"a.weight": np.zeros(1)}, lr=0.5, momentum=0.9)
    assert p["a.weight"][0] == 2.0


def test_weight_decay_exemptions():
    names = ["0.weight", "0.bias", "1.slope", "head.W", "head.b"]
    assert [decays(n) for n in names] == [True, False, False, True, False]
    p = {n: np.ones(3) for n in names}
    v = {n: np.zeros(3) for n in names}
    for _ in range(5):
        sgd_step(p, {n: np.zeros(3) for n in names}, v, lr=0.1, momentum=0.9, weight_decay=0.5)
    for n in names:
        assert np.all(p[n] == 1.0) != decays(n)


def test_sgd_non_finite_gradient():
    with pytest.raises(DivergedError) as e:
        sgd_step({"x": np.ones(1)}, {"x": np.array([np.nan])}, {"x": np.zeros(1)}, 0.1, iteration=17)
    assert e.value.iteration == 17


def test_lr_at_examples():
    s = LRSchedule(0.1, (12000,), 10)
    assert lr_at(s, 0) == 0.1
    assert lr_at(s, 11999) == 0.1
    assert lr_at(s, 12000) == pytest.approx(0.01, rel=1e-15)
    assert lr_at(LRSchedule(1.0, (100, 200), 10), 250) == pytest.approx(0.01, rel=1e-15)
    with pytest.raises(InvalidInputError):
        lr_at(s, -1)


def test_config_validation():
    for bad in [dict(batch_size=0), dict(base_lr=0), dict(momentum=1.0), dict(weight_decay=-1),
                dict(pbar_interval=0), dict(dtype="float16"), dict(seed=-1), dict(pbar_mode="x")]:
        with pytest.raises(InvalidInputError):
            TrainConfig(**bad)
    assert TrainConfig(total_iterations=2000).lr_drops == (1500,)


def test_batches_reshuffle_and_drop_tail():
    it = batches(10, 4, Rng(0))
    epoch1 = [next(it) for _ in range(2)]
    epoch2 = [next(it) for _ in range(2)]
    assert all(len(b) == 4 for b in epoch1 + epoch2)
    assert len(set(np.concatenate(epoch1).tolist())) == 8
    assert not np.array_equal(np.concatenate(epoch1), np.concatenate(epoch2))


def test_train_deterministic():
    a = train(toy_config(noise=NoiseSpec("annealed", 0.3)))
    b = train(toy_config(noise=NoiseSpec("annealed", 0.3)))
    assert [m.row() for m in a.metrics] == [m.row() for m in b.metrics]
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])


def test_zero_iterations():
    r = train(toy_config(total_iterations=0))
    assert [m.iteration for m in r.metrics] == [0]


def test_metrics_schedule_and_ranges():
    r = train(toy_config(total_iterations=50, pbar_interval=20))
    assert [m.iteration for m in r.metrics] == [0, 20, 40, 50]
    assert list(METRIC_FIELDS) == ["iteration", "loss", "train_err", "test_err", "p_bar", "lr", "ms"]
    for m in r.metrics:
        assert 0 <= m.train_err <= 100 and 0 <= m.test_err <= 100
        assert 0 < m.p_bar < 1 and m.ms == 0.0


def test_alpha_zero_variants_share_trajectory():
    a = train(toy_config(noise=NoiseSpec("annealed", 0.0)))
    b = train(toy_config(noise=NoiseSpec("amplitude", 0.0)))
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])
    assert [m.row() for m in a.metrics] == [m.row() for m in b.metrics]


def test_none_matches_none():
    a = train(toy_config())
    b = train(toy_config())
    np.testing.assert_allclose([m.loss for m in a.metrics], [m.loss for m in b.metrics], rtol=0, atol=1e-12)


def test_noise_variant_does_not_move_init_or_batches():
    a = train(toy_config(total_iterations=0))
    b = train(toy_config(total_iterations=0, noise=NoiseSpec("annealed", 1.0)))
    assert a.metrics[0].loss == b.metrics[0].loss
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])


def test_loss_decreases_on_toy():
    r = train(toy_config(total_iterations=500, base_lr=0.01, pbar_interval=500))
    assert r.metrics[-1].loss < r.metrics[0].loss


def test_separable_toy_reaches_low_error():
    cfg = toy_config(dataset=DatasetSpec(kind="synthetic", n_per_class=200, test_per_class=500, dim=2,
                                         separation=10.0), total_iterations=300)
    assert train(cfg).metrics[-1].test_err < 1.0


def test_indistinguishable_classes_near_chance():
    cfg = toy_config(dataset=DatasetSpec(kind="synthetic", n_per_class=200, test_per_class=500, dim=2,
                                         separation=0.0), total_iterations=300)
    assert abs(train(cfg).metrics[-1].test_err - 50) <= 5


def test_evaluate_zero_model_predicts_class_zero():
    train_set, test_set = load_datasets(DatasetSpec(kind="synthetic", n_per_class=10, test_per_class=37))
    net = Network.build(TOY_LAYERS, (2,), Rng(0))
    head = HeadParams.zeros(2, 16)
    assert evaluate(net, head, test_set) == 100.0 * np.count_nonzero(test_set.labels != 0) / len(test_set)
    assert evaluate(net, head, test_set) == 50.0


def test_divergence_detected():
    with pytest.raises(DivergedError):
        train(toy_config(base_lr=1e6, momentum=0.0, total_iterations=50, pbar_interval=1))


def test_timing_fills_ms():
    r = train(toy_config(total_iterations=20, pbar_interval=10), timing=True)
    assert r.metrics[-1].ms > 0


def test_pbar_modes():
    noisy = train(toy_config(noise=NoiseSpec("annealed", 1.0), total_iterations=40))
    clean = train(toy_config(noise=NoiseSpec("annealed", 1.0), total_iterations=40, pbar_mode="clean"))
    assert [m.p_bar_clean for m in noisy.metrics] == [m.p_bar for m in clean.metrics]
    assert all(m.p_bar <= m.p_bar_clean for m in noisy.metrics)


def test_mnist_short_run_learns(mnist_available):
    spec = DatasetSpec(kind="mnist_idx", per_class=20, **mnist_available)
    r = train(TrainConfig(dataset=spec, total_iterations=60, pbar_interval=60, base_lr=0.02))
    assert r.metrics[-1].loss < r.metrics[0].loss
    assert r.metrics[-1].test_err < 60
