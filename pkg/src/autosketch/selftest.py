"""Fast invariant checks runnable from the command line (a few seconds)."""

from __future__ import annotations

import math

import numpy as np

from .fedopt import FlConfig, fedavg_run, make_linear_task
from .fme import FmeConfig, adapt_norm_fme, norm_pool
from .metrics import CommLedger, compression_rate, k_tail, tail_norm
from .privacy import PrivacyBudget, above_threshold_init, above_threshold_query
from .secagg import FieldConfig, pairwise_masks, secagg_sum
from .seeding import make_rng
from .sketching import SketchOperator, SketchParams, sketch, top_k, unsketch_median, unsketch_rows


def _sketch_linear():
    op = SketchOperator(SketchParams(3, 4, 5, 40), seed=1)
    rng = make_rng(0, "selftest")
    a, b = rng.normal(size=40), rng.normal(size=40)
    lhs = sketch(op, 2.0 * a - b).data
    rhs = 2.0 * sketch(op, a).data - sketch(op, b).data
    return np.allclose(lhs, rhs, atol=1e-12)


def _sketch_norm_on_average():
    rng = make_rng(0, "selftest-norm")
    z = rng.normal(size=64)
    ratios = [np.linalg.norm(sketch(SketchOperator(SketchParams(1, 8, 16, 64), seed=s), z).data) ** 2
              / np.linalg.norm(z) ** 2 for s in range(400)]
    return abs(np.mean(ratios) - 1.0) < 0.05


def _unsketch_unbiased():
    z = np.zeros(32)
    z[3] = 1.0
    est = np.mean([unsketch_rows(SketchOperator(SketchParams(1, 2, 4, 32), seed=s), sketch(
        SketchOperator(SketchParams(1, 2, 4, 32), seed=s), z))[0] for s in range(2000)], axis=0)
    return abs(est[3] - 1.0) < 0.02 and np.max(np.abs(np.delete(est, 3))) < 0.1


def _sparse_recovery():
    z = np.zeros(256)
    z[[5, 77, 200]] = [3.0, -2.0, 1.5]
    op = SketchOperator(SketchParams(9, 2, 24, 256), seed=7)
    return np.allclose(top_k(unsketch_median(op, sketch(op, z)), 3), z, atol=1e-12)


def _masks_cancel():
    field = FieldConfig()
    total = np.zeros(16, dtype=np.uint64)
    for m in pairwise_masks(5, 3, 11, 16, field):
        total = (total + m) & field.mask
    return not total.any()


def _masked_matches_ideal():
    rng = make_rng(0, "selftest-secagg")
    msgs = rng.uniform(-1, 1, size=(10, 20))
    gap = np.max(np.abs(secagg_sum(msgs, "masked", seed=2) - secagg_sum(msgs, "ideal")))
    return gap < 1e-5


def _compression_example():
    return abs(compression_rate(CommLedger(100, [20, 30], [5, 5])) - 200 / 60) < 1e-12


def _tail_norm_example():
    z = np.zeros(10)
    z[:2] = [3.0, 4.0]
    return abs(tail_norm(z, 1, 5.0) - 0.6) < 1e-12 and k_tail(lambda k: 0.0, z).k == 2


def _above_threshold_halts():
    state = above_threshold_init(0.0, 1e-6, 1.0, make_rng(0, "selftest-at"))
    answers = [above_threshold_query(state, v) for v in (5.0, 4.0, -5.0)]
    return answers == [False, False, True] and state.halt_index == 3


def _adapt_norm_runs():
    cfg = FmeConfig(n=50, d=64, G=1.0, budget=PrivacyBudget(math.inf, 1e-5), beta=0.1)
    pool = norm_pool(200, 64, 1.0, 0.5, make_rng(0, "selftest-pool"))
    out = adapt_norm_fme(pool, cfg, seed=3)
    again = adapt_norm_fme(pool, cfg, seed=3)
    return out.rounds_used == 2 and np.array_equal(out.estimate, again.estimate)


def _fl_deterministic():
    task = make_linear_task(d=10, num_clients=20, samples_per_client=5, seed=0)
    cfg = FlConfig(rounds=5, clients_per_round=4, noise_multiplier=0.5, estimator="adapt-norm")
    a, b = fedavg_run(task, cfg, seed=1), fedavg_run(task, cfg, seed=1)
    return np.array_equal(a.model, b.model) and len(a.logs) == 5


CHECKS = (
    ("sketch is linear", _sketch_linear),
    ("sketch preserves norm on average", _sketch_norm_on_average),
    ("unsketch is unbiased", _unsketch_unbiased),
    ("median unsketch recovers a sparse vector", _sparse_recovery),
    ("pairwise masks cancel", _masks_cancel),
    ("masked aggregation matches ideal", _masked_matches_ideal),
    ("compression rate example", _compression_example),
    ("tail norm and generalized sparsity", _tail_norm_example),
    ("above-threshold halts on first small query", _above_threshold_halts),
    ("adapt-norm run is deterministic", _adapt_norm_runs),
    ("federated run is deterministic", _fl_deterministic),
)


def run_selftest(verbose: bool = True) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, check in CHECKS:
        try:
            ok = bool(check())
            detail = ""
        except Exception as exc:  # report, keep going
            ok, detail = False, f" ({type(exc).__name__}: {exc})"
        failures += not ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}{detail}")
    return failures
