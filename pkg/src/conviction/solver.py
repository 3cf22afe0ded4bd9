"""Convergent learnable optimization solver and the unrolled phase schemes.

The composite objective is ``phi_eps = f + sum_i kappa_i r_eps(h_i(x_i))``
where ``f`` collects the data terms and, for the three-variable joint model,
the synthesis coupling ``(gamma/2) ||g_theta([h_1(x_1), h_2(x_2)]) - x_3||^2``.

Gradient expressions are written once with :mod:`conviction.autodiff`
operators.  The solvers call them with plain arrays and the unrolled networks
call them with tape nodes, so both paths run the same arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatchError, InvalidInputError, LineSearchError
from .imaging import KSpaceData, SamplingMask
from .regularizer import (
    ConvStack,
    SynthesisOperator,
    reg_grad_expr,
    stack_forward,
    stack_input_vjp,
)

# ----------------------------------------------------------------------------
# shared gradient expressions


def phi_grad_expr(x, mask_f, y_dense, weights, kappa, eps: float, delta: float, mode: str):
    """``grad f + kappa grad r_eps`` for the single-image model."""
    gf = ad.fidelity_grad(x, mask_f, y_dense)
    return ad.add(gf, ad.mul(kappa, reg_grad_expr(weights, x, eps, delta, mode)))


def loa_phase_expr(x, mask_f, y_dense, weights, kappa, eps, alpha, tau, delta, mode):
    """One unrolled phase: ``z = x - alpha grad f(x)``, ``x+ = z - tau kappa grad r_eps(z)``."""
    z = ad.sub(x, ad.mul(alpha, ad.fidelity_grad(x, mask_f, y_dense)))
    gr = ad.mul(kappa, reg_grad_expr(weights, z, eps, delta, mode))
    return ad.sub(z, ad.mul(tau, gr))


def descent_phase_expr(x, mask_f, y_dense, weights, kappa, eps, alpha, delta, mode):
    """Plain gradient step ``x - alpha grad phi_eps(x)``."""
    return ad.sub(x, ad.mul(alpha, phi_grad_expr(x, mask_f, y_dense, weights, kappa, eps, delta, mode)))


def smooth_grads_expr(xs: Sequence, data: Sequence, coupling, delta: float, mode: str):
    """Gradients of the smooth part ``f`` for every variable.

    Parameters
    ----------
    xs : sequence
        Variables, each ``(B, 1, H, W)``.
    data : sequence
        ``(mask_f, y_dense)`` per variable or ``None``.
    coupling : tuple or None
        ``(h1_weights, h2_weights, g_weights, gamma, target)``.
    """
    grads = [None] * len(xs)
    for i, (x, d) in enumerate(zip(xs, data)):
        if d is not None:
            grads[i] = ad.fidelity_grad(x, d[0], d[1])
    if coupling is not None:
        h1, h2, gw, gamma, target = coupling
        F1, p1 = stack_forward(h1, xs[0], delta, mode)
        F2, p2 = stack_forward(h2, xs[1], delta, mode)
        d1 = ad.value(F1).shape[1]
        d2 = ad.value(F2).shape[1]
        out, pg = stack_forward(gw, ad.concat([F1, F2], axis=1), delta, mode)
        c = ad.mul(gamma, ad.sub(out, xs[target]))
        ccat = stack_input_vjp(gw, pg, c, delta, mode)
        g1 = stack_input_vjp(h1, p1, ad.channel_slice(ccat, 0, d1), delta, mode)
        g2 = stack_input_vjp(h2, p2, ad.channel_slice(ccat, d1, d1 + d2), delta, mode)
        for i, g in ((0, g1), (1, g2), (target, ad.neg(c))):
            grads[i] = g if grads[i] is None else ad.add(grads[i], g)
    return [g if g is not None else np.zeros_like(ad.value(x)) for g, x in zip(grads, xs)]


def reg_grads_expr(xs: Sequence, regs: Sequence, eps: float, delta: float, mode: str):
    """``kappa_i grad r_eps`` per variable; ``regs`` holds ``(weights, kappa)`` or ``None``."""
    out = []
    for x, r in zip(xs, regs):
        if r is None:
            out.append(np.zeros_like(ad.value(x)))
        else:
            out.append(ad.mul(r[1], reg_grad_expr(r[0], x, eps, delta, mode)))
    return out


# ----------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class Coupling:
    """Synthesis coupling of the joint model.

    The extractors ``h_1, h_2`` are those of the first two regularizers.
    """

    synthesis: SynthesisOperator
    gamma: float
    target: int = 2

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidInputError("coupling weight gamma must be positive")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Composite objective over one image or the joint triple ``(x1, x2, x3)``.

    Attributes
    ----------
    data_terms : tuple
        ``KSpaceData`` (or ``None``) per variable.
    regularizers : tuple
        ``RegularizerSpec`` (or ``None``) per variable.
    coupling : Coupling, optional
        Only allowed with three variables.
    """

    data_terms: tuple
    regularizers: tuple
    coupling: Coupling | None = None

    def __post_init__(self):
        n = len(self.data_terms)
        if n not in (1, 3):
            raise InvalidInputError("objectives have 1 or 3 image variables")
        if len(self.regularizers) != n:
            raise DimensionMismatchError("one regularizer slot per variable is required")
        if self.coupling is not None:
            if n != 3:
                raise InvalidInputError("coupling requires the three-variable model")
            if self.regularizers[0] is None or self.regularizers[1] is None:
                raise InvalidInputError("coupling needs extractors on the first two variables")
            fin = self.coupling.synthesis.fusion.in_channels
            d = self.regularizers[0].extractor.out_channels + self.regularizers[1].extractor.out_channels
            if fin != d:
                raise DimensionMismatchError(f"fusion expects {fin} channels, extractors give {d}")
        stacks = [r.extractor for r in self.regularizers if r is not None]
        if self.coupling is not None:
            stacks.append(self.coupling.synthesis.fusion)
        if len({(s.delta, s.mode) for s in stacks}) > 1:
            raise InvalidInputError("all stacks in one objective must share delta and arithmetic mode")

    @property
    def n_vars(self) -> int:
        return len(self.data_terms)

    @property
    def positions(self) -> int:
        """Total row count ``m`` summed over regularized variables."""
        h, w = self._shape()
        return h * w * sum(r is not None for r in self.regularizers)

    def _shape(self):
        for d in self.data_terms:
            if d is not None:
                return d.mask.shape
        raise InvalidInputError("objective has no data term to fix the image size")

    def _stack_meta(self):
        for r in self.regularizers:
            if r is not None:
                return r.extractor.delta, r.extractor.mode
        if self.coupling is not None:
            f = self.coupling.synthesis.fusion
            return f.delta, f.mode
        return 1e-3, "complex"

    def with_eps(self, eps: float) -> "ObjectiveSpec":
        regs = tuple(None if r is None else r.with_eps(eps) for r in self.regularizers)
        return ObjectiveSpec(self.data_terms, regs, self.coupling)


class _Objective:
    """Numeric evaluator for an :class:`ObjectiveSpec` on 4D variables."""

    def __init__(self, spec: ObjectiveSpec):
        self.spec = spec
        self.delta, self.mode = spec._stack_meta()
        self.data = []
        for d in spec.data_terms:
            if d is None:
                self.data.append(None)
                continue
            if d.n_coils is not None:
                raise InvalidInputError("solver objectives take single-coil measurements")
            yd = d.dense()[None, None]
            self.data.append((d.mask.as_float(), yd))
        self.regs = [None if r is None else (r.extractor.layers, r.kappa) for r in spec.regularizers]
        c = spec.coupling
        self.coupling = None
        if c is not None:
            self.coupling = (
                spec.regularizers[0].extractor.layers,
                spec.regularizers[1].extractor.layers,
                c.synthesis.fusion.layers,
                c.gamma,
                c.target,
            )

    def value(self, xs, eps: float) -> float:
        total = 0.0
        for x, d in zip(xs, self.data):
            if d is not None:
                r = d[0] * np.fft.fft2(x, norm="ortho") - d[1]
                total += 0.5 * float(np.vdot(r, r).real)
        for x, r in zip(xs, self.regs):
            if r is not None:
                F, _ = stack_forward(r[0], x, self.delta, self.mode)
                total += r[1] * float(np.sum(np.sqrt(np.sum(np.abs(F) ** 2, axis=1) + eps * eps) - eps))
        if self.coupling is not None:
            h1, h2, gw, gamma, target = self.coupling
            F1, _ = stack_forward(h1, xs[0], self.delta, self.mode)
            F2, _ = stack_forward(h2, xs[1], self.delta, self.mode)
            out, _ = stack_forward(gw, np.concatenate([F1, F2], axis=1), self.delta, self.mode)
            res = out - xs[target]
            total += 0.5 * gamma * float(np.vdot(res, res).real)
        return total

    def grad_f(self, xs):
        return smooth_grads_expr(xs, self.data, self.coupling, self.delta, self.mode)

    def grad_R(self, xs, eps: float):
        return reg_grads_expr(xs, self.regs, eps, self.delta, self.mode)

    def grad(self, xs, eps: float):
        if len(xs) == 1 and self.coupling is None and self.data[0] is not None and self.regs[0] is not None:
            d, r = self.data[0], self.regs[0]
            return [phi_grad_expr(xs[0], d[0], d[1], r[0], r[1], eps, self.delta, self.mode)]
        return [ad.add(a, b) for a, b in zip(self.grad_f(xs), self.grad_R(xs, eps))]


def _as_state(x, n: int) -> tuple[list[np.ndarray], bool]:
    if n == 1 and not isinstance(x, (list, tuple)):
        xs = [x]
        single = True
    else:
        xs = list(x)
        single = False
    if len(xs) != n:
        raise DimensionMismatchError(f"expected {n} image variables, got {len(xs)}")
    out = []
    for v in xs:
        v = np.asarray(v, dtype=np.complex128)
        if v.ndim != 2:
            raise DimensionMismatchError("image variables must be 2D")
        out.append(v[None, None].copy())
    return out, single


def _from_state(xs, single: bool):
    imgs = [x[0, 0] for x in xs]
    return imgs[0] if single else tuple(imgs)


def objective_eval(spec: ObjectiveSpec, state, eps: float | None = None):
    """Value and per-variable gradients of the smoothed objective.

    Parameters
    ----------
    spec : ObjectiveSpec
    state : ndarray or tuple of ndarray
        One image, or the triple for the joint model.
    eps : float, optional
        Overrides the smoothing of every regularizer.

    Returns
    -------
    value : float
    grads : ndarray or tuple of ndarray
        Matches the structure of ``state``.
    """
    if eps is not None:
        spec = spec.with_eps(eps)
    xs, single = _as_state(state, spec.n_vars)
    shape = spec._shape()
    for x in xs:
        if x.shape[-2:] != shape:
            raise DimensionMismatchError(f"variable shape {x.shape[-2:]} does not match data shape {shape}")
    eps_v = next((r.eps for r in spec.regularizers if r is not None), 1.0)
    obj = _Objective(spec)
    return obj.value(xs, eps_v), _from_state(obj.grad(xs, eps_v), single)


# ----------------------------------------------------------------------------
# convergent solver


@dataclass(frozen=True)
class LOAConfig:
    """Hyperparameters of the convergent solver; defaults are the reference settings."""

    alpha0: float = 0.01
    tau0: float = 0.01
    a: float = 1e5
    sigma: float = 1e3
    rho: float = 0.9
    gamma: float = 0.9
    eps0: float = 1e-3
    eps_tol: float = 1e-3
    T_max: int = 1000
    max_backtracks: int = 200

    def __post_init__(self):
        if not (0 < self.rho < 1 and 0 < self.gamma < 1):
            raise InvalidInputError("rho and gamma must lie in (0, 1)")
        if not (self.alpha0 > 0 and self.tau0 > 0 and self.a > 0 and self.sigma > 0 and self.eps0 > 0):
            raise InvalidInputError("step sizes, a, sigma and eps0 must be positive")
        if self.eps_tol < 0 or self.T_max < 1 or self.max_backtracks < 1:
            raise InvalidInputError("eps_tol must be nonnegative, T_max and max_backtracks positive")


def reduction_count(cfg: LOAConfig) -> int:
    """Number of smoothing reductions after which ``sigma * eps < eps_tol``."""
    if cfg.sigma * cfg.eps0 < cfg.eps_tol:
        return 0
    k = math.ceil(math.log(cfg.eps_tol / (cfg.sigma * cfg.eps0)) / math.log(cfg.gamma))
    # guard the boundary case where the ratio is an exact power
    while cfg.sigma * cfg.eps0 * cfg.gamma**k >= cfg.eps_tol:
        k += 1
    while k > 0 and cfg.sigma * cfg.eps0 * cfg.gamma ** (k - 1) < cfg.eps_tol:
        k -= 1
    return k


@dataclass(frozen=True)
class TraceRecord:
    """One solver phase.

    ``phi`` is ``phi_{eps_t}(x_t)``; ``grad_norm`` is ``||grad phi_{eps_t}(x_{t+1})||``.
    ``phi_next``, ``step_sq`` and ``grad_norm_start`` let the acceptance
    inequalities be re-checked from the trace alone.
    """

    phase: int
    phi: float
    eps: float
    alpha: float
    branch: str
    grad_norm: float
    backtracks: int
    phi_next: float
    step_sq: float
    grad_norm_start: float
    eps_next: float

    def as_row(self) -> dict:
        return dict(self.__dict__)


TRACE_COLUMNS = [
    "phase", "phi", "eps", "alpha", "branch", "grad_norm", "backtracks",
    "phi_next", "step_sq", "grad_norm_start", "eps_next",
]


@dataclass(frozen=True)
class SolveResult:
    x_final: object
    trace: tuple
    terminated_by: str
    final_phi: float
    positions: int
    config: LOAConfig

    @property
    def eps_final(self) -> float:
        return self.trace[-1].eps_next if self.trace else self.config.eps0


_ROUNDOFF = 64 * np.finfo(float).eps


def _sqnorm(xs) -> float:
    return float(sum(np.vdot(x, x).real for x in xs))


def _solve(spec: ObjectiveSpec, x0, cfg: LOAConfig, scheme: str) -> SolveResult:
    xs, single = _as_state(x0, spec.n_vars)
    shape = spec._shape()
    for x in xs:
        if x.shape[-2:] != shape:
            raise DimensionMismatchError(f"initial iterate shape {x.shape[-2:]} does not match data {shape}")
    obj = _Objective(spec)
    a, eps, alpha, tau = cfg.a, cfg.eps0, cfg.alpha0, cfg.tau0
    phi_x = obj.value(xs, eps)
    g_x = obj.grad(xs, eps)
    trace = []
    terminated = "max-phases"
    for t in range(cfg.T_max):
        gn0 = math.sqrt(_sqnorm(g_x))
        new = None
        branch = "v"
        backtracks = 0
        used_alpha = alpha
        if gn0 <= _ROUNDOFF * (1.0 + math.sqrt(_sqnorm(xs))):
            # gradient is pure round-off; a null step meets the decrease test with equality
            new, phi_new, step = xs, phi_x, 0.0
        elif scheme == "loa":
            gf = obj.grad_f(xs)
            zs = [ad.sub(x, ad.mul(alpha, g)) for x, g in zip(xs, gf)]
            gR = obj.grad_R(zs, eps)
            us = [ad.sub(z, ad.mul(tau, g)) for z, g in zip(zs, gR)]
            step = _sqnorm([u - x for u, x in zip(us, xs)])
            phi_u = obj.value(us, eps)
            if gn0 <= a * math.sqrt(step) and phi_u - phi_x <= -step / a:
                new, phi_new, branch = us, phi_u, "u"
        if new is None:
            while True:
                vs = [ad.sub(x, ad.mul(alpha, g)) for x, g in zip(xs, g_x)]
                step = _sqnorm([v - x for v, x in zip(vs, xs)])
                phi_v = obj.value(vs, eps)
                if phi_v - phi_x <= -step / a:
                    new, phi_new, used_alpha = vs, phi_v, alpha
                    break
                backtracks += 1
                if backtracks > cfg.max_backtracks:
                    raise LineSearchError(
                        f"phase {t}: no sufficient decrease after {cfg.max_backtracks} backtracks "
                        f"(alpha={alpha:.3e}); the gradient is likely inconsistent with the objective"
                    )
                alpha *= cfg.rho
        g_new = obj.grad(new, eps)
        gn = math.sqrt(_sqnorm(g_new))
        eps_next = cfg.gamma * eps if gn < cfg.sigma * cfg.gamma * eps else eps
        trace.append(
            TraceRecord(t, phi_x, eps, used_alpha, branch, gn, backtracks, phi_new, step, gn0, eps_next)
        )
        xs = new
        if eps_next != eps:
            eps = eps_next
            phi_x = obj.value(xs, eps)
            g_x = obj.grad(xs, eps)
        else:
            phi_x, g_x = phi_new, g_new
        if cfg.sigma * eps < cfg.eps_tol:
            terminated = "tolerance"
            break
    return SolveResult(_from_state(xs, single), tuple(trace), terminated, phi_x, spec.positions, cfg)


def loa_solve(spec: ObjectiveSpec, x0, cfg: LOAConfig = LOAConfig()) -> SolveResult:
    """Convergent learnable optimization algorithm with smoothing reduction.

    Each phase tries the residual candidate
    ``u = z - tau grad R_eps(z)`` with ``z = x - alpha grad f(x)`` and accepts
    it when ``||grad phi_eps(x)|| <= a ||u - x||`` and
    ``phi_eps(u) - phi_eps(x) <= -||u - x||^2 / a``.  Otherwise it takes the
    safeguard step ``v = x - alpha grad phi_eps(x)``, shrinking ``alpha`` by
    ``rho`` until the sufficient-decrease test passes.  The step size carries
    over between phases.  The smoothing drops to ``gamma eps`` whenever
    ``||grad phi_eps(x_{t+1})|| < sigma gamma eps`` and the run stops once
    ``sigma eps < eps_tol`` (checked on the updated ``eps``).

    Raises
    ------
    LineSearchError
        If backtracking exceeds ``cfg.max_backtracks``.
    """
    return _solve(spec, x0, cfg, "loa")


def gd_smooth_solve(spec: ObjectiveSpec, x0, cfg: LOAConfig = LOAConfig()) -> SolveResult:
    """Line-searched gradient descent on ``phi_eps`` with the same smoothing rule."""
    return _solve(spec, x0, cfg, "v")


# ----------------------------------------------------------------------------
# trace checks


@dataclass
class TraceCheck:
    descent_violations: list = field(default_factory=list)
    certificate_violations: list = field(default_factory=list)
    trigger_violations: list = field(default_factory=list)
    max_descent_excess: float = -math.inf

    @property
    def ok(self) -> bool:
        return not (self.descent_violations or self.certificate_violations or self.trigger_violations)


def check_trace(result: SolveResult, tol: float = 1e-12) -> TraceCheck:
    """Re-verify the descent invariant, step certificates and the smoothing trigger.

    The invariant is ``phi_{eps_{t+1}}(x_{t+1}) + m eps_{t+1} <= phi_{eps_t}(x_t) + m eps_t``
    with ``m`` the total number of regularizer rows.
    """
    cfg, m = result.config, result.positions
    out = TraceCheck()
    recs = result.trace
    for i, r in enumerate(recs):
        nxt = recs[i + 1].phi if i + 1 < len(recs) else result.final_phi
        excess = (nxt + m * r.eps_next) - (r.phi + m * r.eps)
        out.max_descent_excess = max(out.max_descent_excess, excess)
        if excess > tol:
            out.descent_violations.append((r.phase, excess))
        if r.phi_next - r.phi > -r.step_sq / cfg.a:
            out.certificate_violations.append((r.phase, "sufficient-decrease"))
        if r.branch == "u" and r.grad_norm_start > cfg.a * math.sqrt(r.step_sq):
            out.certificate_violations.append((r.phase, "gradient-bound"))
        reduced = r.eps_next < r.eps
        should = r.grad_norm < cfg.sigma * cfg.gamma * r.eps
        if reduced != should or (reduced and r.eps_next != cfg.gamma * r.eps):
            out.trigger_violations.append(r.phase)
        if i + 1 < len(recs) and recs[i + 1].eps != r.eps_next:
            out.trigger_violations.append(r.phase)
    return out


# ----------------------------------------------------------------------------
# standalone phase operators of the multi-coil networks


def _centered_kspace_conv(weights, u, delta: float, mode: str):
    """``F^H K(F u)`` with ``K`` applied on the centred spectrum."""
    k = ad.fftshift(ad.fft2(u))
    out, _ = stack_forward(weights, k, delta, mode)
    return ad.ifft2(ad.ifftshift(out))


def prox_phase_expr(b, J, G, Gt, Jt, alpha, delta: float, mode: str, axis: int = 1):
    """``b + Jt(Gt(S_alpha(G(J(b)))))`` on a ``(B, Nc, H, W)`` stack."""
    v, _ = stack_forward(J, b, delta, mode)
    feats, _ = stack_forward(G, v, delta, mode)
    shrunk = ad.soft_shrink(feats, alpha, axis=axis)
    back, _ = stack_forward(Gt, shrunk, delta, mode)
    res, _ = stack_forward(Jt, back, delta, mode)
    return ad.add(b, res)


def landweber_expr(u, mask_f, y_dense, rho):
    return ad.sub(u, ad.mul(rho, ad.fidelity_grad(u, mask_f, y_dense)))


def hybrid_phase_expr(u, mask_f, y_dense, rho, M: tuple, K, delta: float, mode: str):
    """Landweber step, image-domain residual ``M`` and k-space residual ``K``.

    Returns ``(u_next, u_bar)``.
    """
    J, G, Gt, Jt = M
    b = landweber_expr(u, mask_f, y_dense, rho)
    v, _ = stack_forward(J, b, delta, mode)
    feats, _ = stack_forward(G, v, delta, mode)
    back, _ = stack_forward(Gt, feats, delta, mode)
    res, _ = stack_forward(Jt, back, delta, mode)
    ubar = ad.add(b, res)
    return ad.add(ubar, _centered_kspace_conv(K, ubar, delta, mode)), ubar


def learned_init_expr(y_dense, K0, delta: float, mode: str):
    """``F^H (f + K0(f))`` with ``K0`` on the centred zero-filled spectrum."""
    ks = np.fft.fftshift(y_dense, axes=(-2, -1))
    out, _ = stack_forward(K0, ks, delta, mode)
    return ad.ifft2(ad.add(y_dense, ad.ifftshift(out)))


def _coil_batch(b) -> tuple[np.ndarray, bool]:
    b = np.asarray(b, dtype=np.complex128)
    if b.ndim == 3:
        return b[None], True
    if b.ndim == 4:
        return b, False
    raise DimensionMismatchError(f"expected a (Nc, H, W) coil stack, got shape {b.shape}")


def _stacks_meta(stacks: Sequence[ConvStack]):
    meta = {(s.delta, s.mode) for s in stacks}
    if len(meta) != 1:
        raise InvalidInputError("stacks in one phase must share delta and arithmetic mode")
    return meta.pop()


def prox_phase_combine(b, J: ConvStack, G: ConvStack, Gt: ConvStack, Jt: ConvStack, alpha: float) -> np.ndarray:
    """Combine-then-regularize residual update on a coil stack.

    ``u = b + Jt(Gt(S_alpha(G(J(b)))))``: combine coils into one image with
    ``J``, encode with ``G``, shrink rowwise, decode with ``Gt`` and spread back
    to coils with ``Jt``.
    """
    b4, squeeze = _coil_batch(b)
    if J.in_channels != b4.shape[1] or Jt.out_channels != b4.shape[1]:
        raise DimensionMismatchError("J/Jt channel counts must match the coil count")
    if G.in_channels != J.out_channels or Gt.in_channels != G.out_channels or Jt.in_channels != Gt.out_channels:
        raise DimensionMismatchError("stack channel counts are not compatible")
    if alpha < 0:
        raise InvalidInputError("shrinkage threshold must be nonnegative")
    delta, mode = _stacks_meta([J, G, Gt, Jt])
    out = prox_phase_expr(b4, J.layers, G.layers, Gt.layers, Jt.layers, alpha, delta, mode)
    return out[0] if squeeze else out


def hybrid_phase(u, f: KSpaceData, mask: SamplingMask, rho: float, M: tuple, K: ConvStack) -> np.ndarray:
    """One hybrid-domain phase on a coil stack.

    ``b = u - rho F^H P^T (P F u - f)``, ``u_bar = b + M(b)`` with
    ``M = Jt o Gt o G o J`` and ``u+ = u_bar + F^H K(F u_bar)``.  ``K`` acts on
    the centred (fftshifted) spectrum.
    """
    u4, squeeze = _coil_batch(u)
    if f.values.ndim != 2 or f.values.shape[0] != u4.shape[1]:
        raise DimensionMismatchError("measurements must carry one row per coil")
    if mask.shape != u4.shape[-2:]:
        raise DimensionMismatchError("mask and image shapes differ")
    J, G, Gt, Jt = M
    if K.in_channels != u4.shape[1] or K.out_channels != u4.shape[1]:
        raise DimensionMismatchError("K must map the coil channels to themselves")
    delta, mode = _stacks_meta([J, G, Gt, Jt, K])
    y = f.dense()[None]
    out, _ = hybrid_phase_expr(
        u4, mask.as_float(), y, rho, (J.layers, G.layers, Gt.layers, Jt.layers), K.layers, delta, mode
    )
    return out[0] if squeeze else out


def learned_init(f: KSpaceData, k0: ConvStack) -> np.ndarray:
    """Initial coil images ``F^H (f + K0(f))`` from zero-filled measurements."""
    if f.values.ndim == 1:
        y = f.dense()[None, None]
        nc = 1
    else:
        y = f.dense()[None]
        nc = f.values.shape[0]
    if k0.in_channels != nc or k0.out_channels != nc:
        raise DimensionMismatchError(f"K0 must map {nc} coil channels to themselves")
    out = learned_init_expr(y, k0.layers, k0.delta, k0.mode)[0]
    return out if f.values.ndim == 2 else out[0]


# ----------------------------------------------------------------------------
# fixed-T differentiable unrolling


@dataclass(frozen=True, eq=False)
class UnrolledParams:
    """An LOA network description with its parameter arrays."""

    net: object
    values: dict

    def __post_init__(self):
        missing = set(self.net.init_params(np.random.default_rng(0))) - set(self.values)
        if missing:
            raise InvalidInputError(f"parameters missing for the network: {sorted(missing)}")


@dataclass(frozen=True, eq=False)
class Tape:
    """Record of one unrolled pass.

    ``states`` holds the iterates ``x_0 .. x_T``; ``leaves`` and ``output``
    are the tape nodes used by :meth:`backward`.
    """

    states: tuple
    leaves: dict
    output: object

    def backward(self, cotangent) -> dict:
        """Parameter gradients of ``Re <cotangent, x_T>``."""
        if not isinstance(self.output, ad.Node):
            return {k: np.zeros_like(v.value) for k, v in self.leaves.items()}
        seed = np.asarray(cotangent, dtype=np.complex128).reshape(self.output.value.shape)
        grads = ad.backward(self.output, seed)
        return {k: ad.grad_of(grads, n) for k, n in self.leaves.items()}


def unrolled_forward(params: UnrolledParams, y: KSpaceData, mask: SamplingMask | None = None,
                     omega: float | None = None, T: int | None = None):
    """Run the LOA network for ``T`` phases without line search or branching.

    Each phase is ``z = x - alpha_t grad f(x)``,
    ``x <- z - tau_t sigmoid(omega) grad r_eps_t(z)`` with ``eps_t`` from the
    network's fixed schedule; ``x_0`` is the zero-filled image.

    Returns
    -------
    x_T : ndarray
    tape : Tape
    """
    from .data import Batch
    from .networks import run_network

    net = params.net
    mask = y.mask if mask is None else mask
    if mask != y.mask:
        raise DimensionMismatchError("mask does not match the measurements")
    if y.n_coils is not None:
        raise InvalidInputError("unrolled_forward takes single-coil measurements")
    T = net.T if T is None else T
    if T < 0:
        raise InvalidInputError("phase count must be nonnegative")
    if T > net.T:
        raise InvalidInputError(f"network has {net.T} phases, asked for {T}")
    vals = dict(params.values)
    if omega is not None:
        vals["omega"] = np.full_like(np.asarray(vals["omega"], dtype=float), float(omega))
    leaves = {k: ad.leaf(v, k) for k, v in vals.items()}
    batch = Batch(y.dense()[None, None], mask.as_float()[None, None], None, np.zeros(1, dtype=int))
    states = run_network(net, leaves, batch, T)
    out = states[-1][0]
    xs = tuple(ad.value(s[0])[0, 0] for s in states)
    return xs[-1], Tape(xs, leaves, out)
