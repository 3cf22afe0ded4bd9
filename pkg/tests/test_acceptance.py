"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with its measured values,
so ``pytest -v -s tests/test_acceptance.py`` gives a readable summary.
"""
import math
import time

import numpy as np
import pytest

from conviction.checks import adjoint_suite, descent_suite, gradients_suite, mlm_suite, sandwich_suite
from conviction.experiments import DeskSetup, run_desk
from conviction.imaging import make_mask, forward_op, shepp_logan, zero_filled
from conviction.regularizer import RegularizerSpec, default_extractor, soft_shrink
from conviction.solver import LOAConfig, ObjectiveSpec, check_trace, loa_solve, reduction_count
from conviction.training import (
    BilevelConfig,
    QuadraticToy,
    bilevel_train,
    delta_at,
    delta_reductions,
    lambda_at,
)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return emit


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def failing(rows):
    return [(r["check"], r["case"], r["value"]) for r in rows if not r["passed"]]


def test_adjoint_unitarity(report):
    rows, dt = timed(adjoint_suite, cases=100, n=16)
    bad = failing(rows)
    worst = max(r["value"] for r in rows)
    report("adjoint/unitarity", not bad and dt < 5.0,
           f"{len(rows)} checks, worst {worst:.2e} (tol 1e-10), {dt:.2f} s (limit 5 s), failures {bad[:3]}")


def test_gradient_suite(report):
    rows, dt = timed(gradients_suite)
    bad = failing(rows)
    checks = sorted({r["check"] for r in rows})
    report("gradients", not bad and dt < 60.0,
           f"{len(rows)} checks over {len(checks)} quantities, {dt:.1f} s (limit 60 s), failures {bad[:3]}")


def test_sandwich_monotonicity(report):
    rows = sandwich_suite(cases=100)
    bad = failing(rows)
    worst = max(r["value"] for r in rows)
    report("sandwich/monotone", not bad, f"100 maps, worst excess {worst:.2e} (tol 1e-10), failures {bad[:3]}")


def test_descent_invariant(report):
    rows = descent_suite(instances=20, tol=1e-12)
    bad = failing(rows)
    worst = max(r["value"] for r in rows if r["check"].endswith("invariant"))
    report("descent invariant", not bad,
           f"20 instances x 2 solvers, worst phi+m*eps increase {worst:.2e} (tol 1e-12), failures {bad[:3]}")


def test_eps_mechanism(report):
    cfg = LOAConfig(T_max=3000)
    x = shepp_logan(8)
    y = forward_op(x, make_mask("radial", 0.5, 8, 8))
    spec = ObjectiveSpec((y,), (RegularizerSpec(default_extractor(np.random.default_rng(1)), 1e-3, -10.0),))
    res = loa_solve(spec, zero_filled(y), cfg)
    chk = check_trace(res)

    # geometric arithmetic, evaluated independently of the solver module
    ratio = cfg.eps_tol / (cfg.sigma * cfg.eps0)
    k = math.ceil(math.log(ratio) / math.log(cfg.gamma))
    reductions = sum(r.eps_next < r.eps for r in res.trace)
    ok = (
        not chk.trigger_violations
        and cfg.sigma * res.eps_final < cfg.eps_tol
        and reduction_count(cfg) == k
        and reductions == k
        and res.terminated_by == "tolerance"
    )
    report("eps mechanism", ok,
           f"{reductions} reductions (geometric rule {k}), sigma*eps_final={cfg.sigma * res.eps_final:.3e}, "
           f"terminated by {res.terminated_by} after {len(res.trace)} phases, "
           f"{len(chk.trigger_violations)} trigger violations")


def test_mlm_equivalence(report):
    rows, dt = timed(mlm_suite, seeds=20)
    worst = max(r["value"] for r in rows)
    report("MLM == backprop", not failing(rows) and dt < 10.0,
           f"20 seeds, worst inf-norm gap {worst:.2e} (tol 1e-10), {dt:.2f} s (limit 10 s)")


def brute_prox(f, alpha, grid=41, rounds=30):
    """Minimize ``1/2 |z - f|^2 + alpha |z|`` over the plane by grid zooming."""
    obj = lambda z: 0.5 * np.sum((z - f) ** 2, axis=-1) + alpha * np.linalg.norm(z, axis=-1)
    centre = np.zeros(2)
    half = np.linalg.norm(f) + 1.0
    for _ in range(rounds):
        t = np.linspace(-half, half, grid)
        pts = centre + np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
        centre = pts[np.argmin(obj(pts))]
        half /= 4.0
    return centre


def test_prox_oracle(report):
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((4, 2)) * 2.0
    worst = 0.0
    for alpha in np.linspace(0.0, 5.0, 50):
        for f in rows:
            want = brute_prox(f, alpha)
            # real two-channel row
            got_real = soft_shrink(f.reshape(2, 1, 1), alpha).ravel()
            # single complex channel carrying the same point
            got_cplx = soft_shrink(np.array([f[0] + 1j * f[1]]).reshape(1, 1, 1), alpha).ravel()[0]
            worst = max(worst, np.max(np.abs(got_real - want)), abs(got_cplx - (want[0] + 1j * want[1])))
    report("prox oracle", worst <= 1e-6, f"50 alphas x 4 rows x 2 layouts, worst gap {worst:.2e} (tol 1e-6)")


def test_bilevel_schedules(report):
    cfg = BilevelConfig()
    exact = all(delta_at(cfg, k) == cfg.delta0 * cfg.nu_delta**k and lambda_at(cfg, k) == cfg.lambda0 * cfg.nu_lambda**k
                for k in range(500))
    n_red = delta_reductions(cfg)
    brute = next(k for k in range(10_000) if cfg.delta0 * cfg.nu_delta**k <= cfg.delta_tol)

    toy = QuadraticToy(np.array([1.0, -0.5, 2.0]), np.array([0.3, 1.0, 0.5]), 1.5)
    run_cfg = BilevelConfig(rho_theta=0.5, rho_omega=0.5, nu_lambda=1.2, max_outer=500, inner_cap=5000,
                            step_rule="scaled-sgd")
    res = bilevel_train(toy, np.zeros(3), np.zeros(1), run_cfg, np.random.default_rng(0))
    late = [r["grad_train_norm"] for r in res.history if r["lambda"] > 1e2]
    worst = max(late) if late else math.inf
    ok = exact and n_red == brute and late and worst < 1e-4
    report("bilevel schedules", ok,
           f"schedules exact={exact}, {n_red} delta reductions (direct count {brute}), "
           f"{len(late)} outer steps with lambda > 1e2, max ||grad_theta L_tr|| there {worst:.2e} (tol 1e-4), "
           f"terminated by {res.terminated_by}")


@pytest.fixture(scope="module")
def desk():
    cache = {}

    def get(T):
        if T not in cache:
            cache[T] = run_desk(DeskSetup(), phases=T)
        return cache[T]

    return get


def test_desk_reconstruction(report, desk):
    r = desk(3)
    report("desk reconstruction", r.gain >= 3.0 and r.seconds < 300.0,
           f"T=3 PSNR {r.psnr:.2f} dB vs zero-filled {r.zero_filled_psnr:.2f} dB, gain {r.gain:+.2f} dB (need 3), "
           f"training {r.seconds:.0f} s (limit 300 s)")


def test_phasewise_improvement(report, desk):
    p = [desk(T).psnr for T in (1, 2, 3)]
    ok = all(b >= a - 0.2 for a, b in zip(p, p[1:]))
    report("phase-wise improvement", ok, "PSNR by T=1,2,3: " + ", ".join(f"{v:.2f}" for v in p) + " dB (slack 0.2)")
