import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import check_grad

from autosketch.fedopt import (
    AdaptNormMean,
    AdaptTailMean,
    DivergenceError,
    FixedSketchMean,
    FlConfig,
    TwoStageMean,
    fedavg_run,
    geometry,
    load_task,
    make_estimator,
    make_linear_task,
    make_logistic_task,
    save_task,
    tail_update,
    two_stage_fl,
)
from autosketch.fedopt.tasks import Task
from autosketch.metrics import compression_rate
from autosketch.privacy import calibrate
from autosketch.seeding import make_rng
from autosketch.sketching import clip


@pytest.fixture(scope="module")
def linear():
    return make_linear_task(d=20, num_clients=40, samples_per_client=10, seed=0)


@pytest.fixture(scope="module")
def logistic():
    return make_logistic_task(d=60, num_clients=60, samples_per_client=10, sparsity=6, val_size=300, seed=1)


def test_config_validation():
    FlConfig()
    bad = [dict(c0=0.0), dict(eta=0.0), dict(eta=1.5), dict(estimator="x"), dict(rounds=-1),
           dict(clients_per_round=0), dict(clip=0.0), dict(noise_multiplier=-1.0), dict(tail_rule="x"),
           dict(secagg_mode="x"), dict(compression=0.5), dict(rows=0), dict(l1_zero_threshold=0.0),
           dict(estimator="two-stage", warmup=5, rounds=4), dict(local_steps=1.5)]
    for kw in bad:
        with pytest.raises(ValueError):
            FlConfig(**kw)
    FlConfig(estimator="two-stage", warmup=4, rounds=4)


@pytest.mark.parametrize("kind", ["linear-regression", "logistic-regression"])
def test_task_gradients_match_finite_differences(kind):
    task = make_linear_task(d=8, seed=2) if kind == "linear-regression" else make_logistic_task(d=8, sparsity=4, seed=2)
    task.l2 = 0.01
    X, y = task.features[0], task.labels[0]
    w = np.random.default_rng(0).normal(size=8)
    err = check_grad(lambda v: task.loss(v, X, y), lambda v: task.grad(v, X, y), w)
    assert err < 1e-5


def test_task_validation_and_round_trip(tmp_path, logistic):
    path = tmp_path / "task.npz"
    save_task(logistic, path)
    again = load_task(path)
    assert again.kind == logistic.kind and again.num_clients == logistic.num_clients
    assert all(np.array_equal(a, b) for a, b in zip(again.features, logistic.features))
    assert again.val_metric(np.ones(60)) == logistic.val_metric(np.ones(60))
    with pytest.raises(ValueError):
        Task("svm", logistic.features, logistic.labels, logistic.val_features, logistic.val_labels)
    with pytest.raises(ValueError):
        Task("logistic-regression", logistic.features, logistic.labels[:-1], logistic.val_features, logistic.val_labels)
    assert logistic.metric_name == "accuracy" and make_linear_task(d=3).metric_name == "mse"


def reference_fedavg(task, cfg, seed):
    """Centralized FedAvg written directly against the task, for the plumbing identity."""
    w, v = np.zeros(task.d), np.zeros(task.d)
    for j in range(1, cfg.rounds + 1):
        cohort = np.sort(make_rng(seed, j, "cohort").choice(task.num_clients, size=cfg.clients_per_round, replace=False))
        deltas = []
        for c in cohort:
            local = w.copy()
            for _ in range(cfg.local_steps):
                local -= cfg.client_lr * task.grad(local, task.features[c], task.labels[c])
            deltas.append(clip(local - w, cfg.clip))
        v = cfg.server_momentum * v + np.sum(deltas, axis=0) / len(deltas)
        w = w + cfg.server_lr * v
    return w


def test_exact_estimator_matches_reference_fedavg(linear):
    cfg = FlConfig(rounds=8, clients_per_round=5, estimator="exact", local_steps=2, clip=0.5)
    result = fedavg_run(linear, cfg, seed=3)
    assert np.array_equal(result.model, reference_fedavg(linear, cfg, 3))
    assert [log.round for log in result.logs] == list(range(1, 9))
    assert result.compression_rate(linear.d) == 1.0


def test_zero_rounds_returns_initial_model(linear):
    w0 = np.arange(20.0)
    result = fedavg_run(linear, FlConfig(rounds=0), seed=0, initial_model=w0)
    assert result.logs == [] and np.array_equal(result.model, w0)
    with pytest.raises(ValueError):
        fedavg_run(linear, FlConfig(rounds=1), initial_model=np.zeros(3))


@pytest.mark.parametrize("estimator", ["exact", "dp", "fixed-sketch", "adapt-norm", "two-stage", "adapt-tail"])
def test_runs_are_deterministic(linear, estimator):
    cfg = FlConfig(rounds=6, clients_per_round=5, noise_multiplier=0.5, estimator=estimator, warmup=3)
    a, b = fedavg_run(linear, cfg, seed=9), fedavg_run(linear, cfg, seed=9)
    assert np.array_equal(a.model, b.model) and a.logs == b.logs
    assert len(a.logs) == 6


@pytest.mark.parametrize("estimator", ["dp", "fixed-sketch", "adapt-norm", "two-stage", "adapt-tail"])
def test_compression_accounting_is_consistent(linear, estimator):
    cfg = FlConfig(rounds=6, clients_per_round=5, noise_multiplier=1.0, estimator=estimator, warmup=2, compression=2.0)
    result = fedavg_run(linear, cfg, seed=1)
    assert math.isclose(result.logs[-1].cum_compression_rate, compression_rate(result.ledger(linear.d)))


def test_recorded_noise_matches_calibration(linear):
    n, z = 5, 1.3
    g = geometry(FlConfig(), linear.d)
    expected = {
        "dp": (calibrate(None, 1.0, n, "dp-fedavg", noise_multiplier=z), None),
        "fixed-sketch": (calibrate(None, 1.0, n, "fixed-sketch-fl", rows=g.rows, noise_multiplier=z), None),
        "adapt-norm": (calibrate(None, 1.0, n, "adapt-norm-fl", rows=g.rows, noise_multiplier=z), "stat"),
        "adapt-tail": (calibrate(None, 1.0, n, "adapt-tail-fl", rows=g.rows, noise_multiplier=z), "stat"),
    }
    for name, (noise, stat) in expected.items():
        cfg = FlConfig(rounds=2, clients_per_round=n, noise_multiplier=z, estimator=name)
        for log in fedavg_run(linear, cfg, seed=0).logs:
            assert math.isclose(log.sketch_noise_std, noise.mean_noise_std)
            assert math.isclose(log.stat_noise_std, noise.stat_noise_scale if stat else 0.0)


def test_width_formula_values():
    cfg = FlConfig(noise_multiplier=1.0, clients_per_round=100, c0=0.1, rows=1, pads=5)
    est = AdaptNormMean(cfg, 10**6)
    s = 1.0 / 100
    # zero norm estimate leaves only the padding: C = 20 / (c0 P)
    assert est.width_for_norm(0.0) == math.ceil(20 / (0.1 * 5))
    assert est.width_for_norm(0.5) == math.ceil((0.5 + math.sqrt(20) * s) ** 2 / (0.1 * 5 * s**2))


def test_doubling_noise_quarters_width():
    base = FlConfig(noise_multiplier=1.0, clients_per_round=1000, rows=1, pads=4)
    narrow = AdaptNormMean(replace(base, noise_multiplier=2.0), 10**9).width_for_norm(1.0)
    wide = AdaptNormMean(base, 10**9).width_for_norm(1.0)
    assert narrow / wide == pytest.approx(0.25, rel=0.01)


def test_width_is_clamped():
    cfg = FlConfig(noise_multiplier=1.0, clients_per_round=10, rows=2, pads=3)
    est = AdaptNormMean(cfg, 60)
    assert est.geom.max_cols == 10 and est.geom.min_cols == 2
    assert est.width_for_norm(100.0) == 10
    assert AdaptNormMean(replace(cfg, noise_multiplier=0.0), 60).width_for_norm(0.0) == 10
    assert AdaptNormMean(replace(cfg, c0=1e9), 60).width_for_norm(0.0) == 2


def test_smaller_c0_gives_wider_sketch():
    widths = [AdaptNormMean(FlConfig(noise_multiplier=1.0, clients_per_round=50, c0=c0, rows=1), 10**6).width_for_norm(0.2)
              for c0 in (0.01, 0.05, 0.1, 0.25)]
    assert widths == sorted(widths, reverse=True) and widths[0] > widths[-1]


def test_default_geometry():
    g = geometry(FlConfig(), 200)
    assert (g.rows, g.pads, g.second_pads, g.second_rows, g.second_cols) == (6, 6, 6, 1, 2)
    assert g.max_cols == 200 // 36


def test_fixed_sketch_width(linear):
    est = FixedSketchMean(FlConfig(compression=2.0, rows=1, pads=2), 100)
    assert est.cols == 25
    assert FixedSketchMean(FlConfig(compression=1000.0, rows=1, pads=2), 100).cols == 1


def test_two_stage_with_full_warmup_is_uncompressed(linear):
    cfg = FlConfig(rounds=5, warmup=5, clients_per_round=5, noise_multiplier=1.0)
    result = two_stage_fl(linear, cfg, seed=0)
    assert result.compression_rate(linear.d) == 1.0
    assert all(log.cols == 0 for log in result.logs)


def test_two_stage_switches_to_fixed_width(logistic):
    cfg = FlConfig(rounds=8, warmup=3, clients_per_round=10, noise_multiplier=3.0, estimator="two-stage", rows=1)
    est = TwoStageMean(cfg, logistic.d)
    result = fedavg_run(logistic, cfg, estimator=est, seed=2)
    stage2 = {log.cols for log in result.logs[3:]}
    assert len(stage2) == 1
    n_hat = np.mean([log.statistic for log in result.logs[:3]])
    assert stage2 == {est.width_for_norm(n_hat)}
    per_round = logistic.d / result.logs[-1].first_scalars
    if per_round > 1:
        # the uncompressed warm-up drags the harmonic rate below the stage-2 rate
        assert result.compression_rate(logistic.d) < per_round


def test_tail_update_rules():
    assert tail_update(10.0, 0.0, "sign", 0.2) == 10.0
    assert tail_update(10.0, 3.0, "sign", 0.2) == 12.0
    assert tail_update(10.0, -3.0, "sign", 0.2) == 8.0
    assert tail_update(10.0, 3.0, "sign", 1.0) == 20.0
    assert tail_update(10.0, -3.0, "sign", 1.0) == 0.0
    assert tail_update(10.0, 0.5, "exponential", 0.2) == pytest.approx(11.0)
    assert tail_update(10.0, 12.0, "linear", 0.2) == 12.0
    with pytest.raises(ValueError):
        tail_update(1.0, 1.0, "bogus", 0.2)


def test_adapt_tail_grows_geometrically_until_cap(logistic):
    cfg = FlConfig(rounds=6, clients_per_round=10, noise_multiplier=0.0, estimator="adapt-tail",
                   initial_cols=2, rows=1, pads=2, eta=0.5)
    est = AdaptTailMean(cfg, logistic.d)
    est.threshold = lambda noise: -1.0  # error always above target
    cols = [log.cols for log in fedavg_run(logistic, cfg, estimator=est, seed=0).logs]
    assert cols == [2, 3, 5, 7, 11, 16]  # ceil of 2 * 1.5^j
    shrink = AdaptTailMean(replace(cfg, initial_cols=20), logistic.d)
    shrink.threshold = lambda noise: 1e9  # always below: shrink to the floor
    cols = [log.cols for log in fedavg_run(logistic, shrink.cfg, estimator=shrink, seed=0).logs]
    assert cols[0] == 20 and cols[-1] == 2


def test_adapt_tail_threshold_formula(logistic):
    cfg = FlConfig(noise_multiplier=2.0, clients_per_round=10, c0=0.1, estimator="adapt-tail")
    est = AdaptTailMean(cfg, logistic.d)
    noise = calibrate(None, 1.0, 10, "adapt-tail-fl", rows=est.geom.rows, noise_multiplier=2.0)
    expected = 0.1 * math.sqrt(60) * noise.mean_noise_std + 2 * noise.stat_noise_scale
    assert math.isclose(est.threshold(noise), expected)


def test_l1_zeroing_removes_large_updates(linear):
    cfg = FlConfig(rounds=3, clients_per_round=5, estimator="exact", l1_zero_threshold=1e-12)
    result = fedavg_run(linear, cfg, seed=0)
    assert not result.model.any()


def test_masked_secagg_run_matches_ideal(logistic):
    cfg = FlConfig(rounds=5, clients_per_round=6, noise_multiplier=0.5, estimator="adapt-norm", rows=1)
    ideal = fedavg_run(logistic, cfg, seed=4)
    masked = fedavg_run(logistic, replace(cfg, secagg_mode="masked"), seed=4)
    assert np.max(np.abs(ideal.model - masked.model)) < 1e-3


def test_divergence_is_reported_with_partial_log():
    task = make_linear_task(d=5, num_clients=10, samples_per_client=5, seed=0)
    cfg = FlConfig(rounds=400, clients_per_round=5, estimator="exact", clip=1e300, client_lr=5.0, server_lr=50.0)
    with pytest.raises(DivergenceError) as info:
        fedavg_run(task, cfg, seed=0)
    assert len(info.value.logs) < 400
    assert all(np.isfinite(log.train_metric) for log in info.value.logs)


def test_make_estimator_registry():
    for name in ("exact", "dp", "fixed-sketch", "adapt-norm", "two-stage", "adapt-tail"):
        assert make_estimator(FlConfig(estimator=name), 50).name == name


def test_noise_free_training_learns(logistic):
    cfg = FlConfig(rounds=40, clients_per_round=10, estimator="exact", client_lr=1.0, local_steps=3)
    result = fedavg_run(logistic, cfg, seed=0)
    assert result.final_val_metric > 0.8
