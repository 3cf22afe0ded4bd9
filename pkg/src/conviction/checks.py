"""Invariant and gradient check suites.

Every suite returns rows ``{suite, check, case, value, tol, passed}``; the
CLI writes them to CSV and exits nonzero on any failure.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .conv import smooth_relu, smooth_relu_deriv
from .data import phantom_set, single_coil_batch
from .imaging import KSpaceData, adjoint_op, data_fidelity, forward_op, make_mask, phantom_variant, zero_filled
from .networks import LOANet
from .regularizer import (
    RegularizerSpec,
    SynthesisOperator,
    conv_stack_forward,
    conv_stack_vjp,
    default_extractor,
    init_conv_stack,
    l21_smoothed,
    position_count,
    r_eps,
    r_eps_value,
)
from .solver import Coupling, LOAConfig, ObjectiveSpec, check_trace, gd_smooth_solve, loa_solve, objective_eval
from .training import LossSpec, backprop_unrolled, eval_loss, loss_eval, mlm_gradients

CHECK_COLUMNS = ["suite", "check", "case", "value", "tol", "passed"]

GRAD_TOL = 1e-5
UNROLLED_TOL = 1e-4


def _row(suite, check, case, value, tol, passed=None) -> dict:
    ok = bool(value <= tol) if passed is None else bool(passed)
    return {"suite": suite, "check": check, "case": case, "value": float(value), "tol": float(tol), "passed": ok}


def _crandn(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _inner(g: np.ndarray, d: np.ndarray) -> float:
    """Directional derivative from a gradient in the ``d/dRe + i d/dIm`` convention."""
    return float(np.sum((np.conj(g) * d).real))


def fd_directional(f: Callable[[np.ndarray], float], x: np.ndarray, d: np.ndarray, h: float = 1e-6) -> float:
    return (f(x + h * d) - f(x - h * d)) / (2 * h)


def rel_err(analytic: float, fd: float) -> float:
    den = max(abs(fd), abs(analytic))
    return abs(analytic - fd) / den if den > 0 else 0.0


# ----------------------------------------------------------------------------
# adjoint / unitarity


def adjoint_suite(cases: int = 100, n: int = 16, seed: int = 0) -> list[dict]:
    """Dot-product test of the sampling operator and Parseval for the FFT."""
    rng = np.random.default_rng(seed)
    rows = []
    patterns = ["radial", "cartesian-rows", "uniform-random"]
    for c in range(cases):
        pat = patterns[c % 3]
        ratio = float(rng.uniform(0.1, 0.9))
        m = make_mask(pat, ratio, n, n, seed=int(rng.integers(1 << 30)))
        x = _crandn(rng, (n, n))
        yv = _crandn(rng, (m.count,))
        lhs = np.vdot(forward_op(x, m).values, yv)
        rhs = np.vdot(x, adjoint_op(KSpaceData(m, yv)))
        rows.append(_row("adjoint", "dot-product", c, abs(lhs - rhs) / max(abs(lhs), 1e-300), 1e-10))
        k = np.fft.fft2(x, norm="ortho")
        e = abs(np.linalg.norm(k) - np.linalg.norm(x)) / np.linalg.norm(x)
        rows.append(_row("adjoint", "parseval", c, e, 1e-10))
    return rows


# ----------------------------------------------------------------------------
# gradients


def _grad_rows(name: str, analytic: float, fd: float, case, tol=GRAD_TOL) -> dict:
    return _row("gradients", name, case, rel_err(analytic, fd), tol)


def gradients_suite(seed: int = 0, directions: int = 3) -> list[dict]:
    """Analytic gradients against central differences."""
    rng = np.random.default_rng(seed)
    rows = []

    # smooth ReLU: elementwise derivative, away from the two kinks by > h
    delta = 1e-3
    v = rng.uniform(-3 * delta, 3 * delta, 400)
    v = v[(np.abs(v) > 1e-6) & (np.abs(np.abs(v) - delta) > 1e-6)]
    h = 1e-9
    fd = (smooth_relu(v + h, delta) - smooth_relu(v - h, delta)) / (2 * h)
    an = smooth_relu_deriv(v, delta)
    rows.append(_row("gradients", "smooth_relu", 0, np.linalg.norm(an - fd) / np.linalg.norm(fd), GRAD_TOL))

    n = 8
    for mode in ("complex", "split-real"):
        st = init_conv_stack(rng, [1, 3, 3, 2], 3, mode=mode)
        x = _crandn(rng, (n, n))
        cot = _crandn(rng, (2, n, n))
        gx, gw = conv_stack_vjp(st, x, cot)

        def fx(z):
            return float(np.sum((np.conj(cot) * conv_stack_forward(st, z)).real))

        for i in range(directions):
            d = _crandn(rng, x.shape)
            rows.append(_grad_rows(f"conv_stack_vjp.input.{mode}", _inner(gx, d), fd_directional(fx, x, d), i))
        for li, w in enumerate(st.layers):
            d = _crandn(rng, w.shape)

            def fw(wl, li=li):
                layers = list(st.layers)
                layers[li] = wl
                return float(np.sum((np.conj(cot) * conv_stack_forward(st.with_layers(layers), x)).real))

            rows.append(_grad_rows(f"conv_stack_vjp.weight{li}.{mode}", _inner(gw[li], d), fd_directional(fw, w, d), 0))

    ext = default_extractor(rng)
    for eps in (1e-1, 1e-3):
        spec = RegularizerSpec(ext, eps, omega=0.3)
        x = _crandn(rng, (n, n))
        _, g = r_eps(spec, x)
        for i in range(directions):
            d = _crandn(rng, x.shape)
            fdv = fd_directional(lambda z: r_eps_value(spec, z), x, d, 1e-7)
            rows.append(_grad_rows(f"r_eps.eps={eps:g}", _inner(g, d), fdv, i))

    m = make_mask("radial", 0.4, n, n)
    y = forward_op(_crandn(rng, (n, n)), m)
    x = _crandn(rng, (n, n))
    _, g = data_fidelity(x, y)
    for i in range(directions):
        d = _crandn(rng, x.shape)
        rows.append(_grad_rows("data_fidelity", _inner(g, d), fd_directional(lambda z: data_fidelity(z, y)[0], x, d), i))

    # single-variable and joint objectives
    spec1 = ObjectiveSpec((y,), (RegularizerSpec(ext, 1e-2, omega=0.0),))
    _, g = objective_eval(spec1, x)
    d = _crandn(rng, x.shape)
    rows.append(_grad_rows("objective_eval.single", _inner(g, d), fd_directional(lambda z: objective_eval(spec1, z)[0], x, d), 0))
    n6 = 6
    m6 = make_mask("uniform-random", 0.5, n6, n6, seed=3)
    ys = [forward_op(_crandn(rng, (n6, n6)), m6) for _ in range(2)]
    h1, h2, h3 = (init_conv_stack(rng, [1, 2, 2], 3) for _ in range(3))
    fusion = init_conv_stack(rng, [4, 3, 1], 3)
    spec3 = ObjectiveSpec(
        (ys[0], ys[1], None),
        (RegularizerSpec(h1, 1e-2), RegularizerSpec(h2, 1e-2), RegularizerSpec(h3, 1e-2)),
        Coupling(SynthesisOperator(fusion), 0.7),
    )
    xs = tuple(_crandn(rng, (n6, n6)) for _ in range(3))
    _, gs = objective_eval(spec3, xs)
    for i in range(directions):
        ds = tuple(_crandn(rng, (n6, n6)) for _ in range(3))
        an = sum(_inner(g_, d_) for g_, d_ in zip(gs, ds))
        fdv = (objective_eval(spec3, tuple(a + 1e-6 * b for a, b in zip(xs, ds)))[0]
               - objective_eval(spec3, tuple(a - 1e-6 * b for a, b in zip(xs, ds)))[0]) / 2e-6
        rows.append(_grad_rows("objective_eval.joint", an, fdv, i))

    # loss cotangents
    out = _crandn(rng, (2, 1, n, n))
    ref = _crandn(rng, (2, 1, n, n))
    rows += _loss_rows(rng, LossSpec("recon-l2"), out, ref, None, directions)
    out = _crandn(rng, (2, 2, n, n))
    ref = _crandn(rng, (2, 2, n, n))
    rows += _loss_rows(rng, LossSpec("ch2-rss", {"gamma": 3.0}), out, ref, _crandn(rng, (2, 1, n, n)), directions)
    aux = (_crandn(rng, (2, 2, n, n)), _crandn(rng, (2, 1, n, n)))
    rows += _loss_rows(rng, LossSpec("ch3-multi", {"gamma": 0.5, "eta": 0.2}), out, ref, aux, directions)
    out = _crandn(rng, (2, 3, n, n))
    ref = np.abs(_crandn(rng, (2, 3, n, n))).astype(complex)
    rows += _loss_rows(rng, LossSpec("ch5-joint"), out, ref, _crandn(rng, (2, 1, n, n)), directions)

    rows += unrolled_gradient_rows(seed)
    return rows


def _loss_rows(rng, spec: LossSpec, out, ref, aux, directions: int) -> list[dict]:
    _, g = loss_eval(spec, out, ref, aux)
    rows = []
    for i in range(directions):
        d = _crandn(rng, out.shape)
        fdv = fd_directional(lambda z: loss_eval(spec, z, ref, aux)[0], out, d)
        rows.append(_grad_rows(f"loss.{spec.kind}", _inner(g, d), fdv, i))
    return rows


def unrolled_gradient_rows(seed: int = 0, n: int = 8, T: int = 2) -> list[dict]:
    """Every parameter of a 2-kernel LOA network on 8x8 images against FD."""
    rng = np.random.default_rng(seed + 1)
    m = make_mask("radial", 0.4, n, n)
    batch = single_coil_batch(phantom_set(2, n, rng), m)
    net = LOANet(T=T, features=2, alpha0=0.5, tau0=0.5, omega0=0.2)
    P = net.init_params(rng)
    spec = LossSpec()
    g = backprop_unrolled(net, P, batch, spec)
    rows = []
    for k, v in P.items():
        d = _crandn(rng, v.shape) if np.iscomplexobj(v) else rng.standard_normal(v.shape)

        def f(z, k=k):
            Q = dict(P)
            Q[k] = z
            return eval_loss(net, Q, batch, spec)

        an = _inner(g[k], d) if np.iscomplexobj(v) else float(np.sum(g[k] * d))
        rows.append(_row("gradients", f"unrolled.{k}", 0, rel_err(an, fd_directional(f, v, d)), UNROLLED_TOL))
    return rows


# ----------------------------------------------------------------------------
# sandwich


def sandwich_suite(cases: int = 100, seed: int = 0, tol: float = 1e-10) -> list[dict]:
    """``r_eps <= r <= r_eps + m eps`` and monotonicity of ``r_eps + m eps`` in ``eps``."""
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(cases):
        shape = (int(rng.integers(1, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        F = _crandn(rng, shape) * 10.0 ** rng.uniform(-3, 1)
        if c % 4 == 0:
            F[:, : shape[1] // 2] = 0  # zero rows are the tight case
        eps = 10.0 ** rng.uniform(-6, 0)
        eps2 = eps * rng.uniform(0, 1)
        m = position_count(F)
        r0, re, re2 = l21_smoothed(F, 0.0), l21_smoothed(F, eps), l21_smoothed(F, eps2)
        scale = max(1.0, r0 + m * eps)
        lower = (re - r0) / scale
        upper = (r0 - (re + m * eps)) / scale
        mono = ((re2 + m * eps2) - (re + m * eps)) / scale
        rows.append(_row("sandwich", "lower", c, lower, tol))
        rows.append(_row("sandwich", "upper", c, upper, tol))
        rows.append(_row("sandwich", "monotone", c, mono, tol))
    return rows


# ----------------------------------------------------------------------------
# descent


def descent_instance(seed: int, n: int = 16, T_max: int = 25):
    rng = np.random.default_rng(seed)
    x = phantom_variant(n, rng)
    pattern = ("radial", "cartesian-rows", "uniform-random")[seed % 3]
    m = make_mask(pattern, float(rng.uniform(0.25, 0.6)), n, n, seed=seed)
    y = forward_op(x, m)
    ext = default_extractor(rng)
    spec = ObjectiveSpec((y,), (RegularizerSpec(ext, 1e-3, omega=float(rng.uniform(-2, 2))),))
    return spec, zero_filled(y), LOAConfig(T_max=T_max)


def descent_suite(instances: int = 20, seed: int = 0, tol: float = 1e-12, n: int = 16, T_max: int = 25) -> list[dict]:
    rows = []
    for i in range(instances):
        spec, x0, cfg = descent_instance(seed + i, n, T_max)
        for name, solver in (("loa", loa_solve), ("gd", gd_smooth_solve)):
            res = solver(spec, x0, cfg)
            chk = check_trace(res, tol)
            rows.append(_row("descent", f"{name}.invariant", i, chk.max_descent_excess, tol, not chk.descent_violations))
            rows.append(_row("descent", f"{name}.certificates", i, len(chk.certificate_violations), 0))
            rows.append(_row("descent", f"{name}.trigger", i, len(chk.trigger_violations), 0))
    return rows


# ----------------------------------------------------------------------------
# MLM


def mlm_toy(seed: int, n: int = 8, T: int = 2):
    rng = np.random.default_rng(seed)
    m = make_mask("radial", 0.4, n, n)
    imgs = phantom_set(2, n, rng).astype(complex) * np.exp(1j * rng.uniform(-0.5, 0.5))
    batch = single_coil_batch(imgs, m)
    net = LOANet(T=T, features=2, share=False, alpha0=float(rng.uniform(0.2, 0.8)),
                 tau0=float(rng.uniform(0.2, 0.8)), omega0=float(rng.normal()))
    return net, net.init_params(rng), batch


def mlm_suite(seeds: int = 20, seed: int = 0, tol: float = 1e-10) -> list[dict]:
    rows = []
    for s in range(seeds):
        net, P, batch = mlm_toy(seed + s)
        spec = LossSpec()
        diff = backprop_unrolled(net, P, batch, spec).max_abs_diff(mlm_gradients(net, P, batch, spec))
        rows.append(_row("mlm", "mlm-vs-backprop", s, diff, tol))
    return rows


SUITES = {
    "adjoint": adjoint_suite,
    "gradients": gradients_suite,
    "sandwich": sandwich_suite,
    "descent": descent_suite,
    "mlm": mlm_suite,
}
