"""Losses, gradients through unrolled networks and the training loops."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import Batch, concat_batches
from .errors import ConfigError, DimensionMismatchError, InvalidInputError
from .imaging import SSIM_K1, SSIM_K2, SamplingMask, psnr, ssim_window
from .networks import run_network

# ----------------------------------------------------------------------------
# losses

LOSS_DEFAULTS: dict[str, dict[str, float]] = {
    "recon-l2": {},
    "ch2-rss": {"gamma": 1e5},
    "ch3-multi": {"gamma": 1e-3, "eta": 1e-4},
    "ch5-joint": {"mu": 0.1},
}


@dataclass(frozen=True)
class LossSpec:
    """Training loss kind and its weights.

    ``weights=None`` selects the default weights.  An explicit mapping must
    name every weight the kind needs.
    """

    kind: str = "recon-l2"
    weights: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.kind not in LOSS_DEFAULTS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; choose from {sorted(LOSS_DEFAULTS)}")
        if self.weights is not None:
            need = set(LOSS_DEFAULTS[self.kind])
            have = set(self.weights)
            if need - have:
                raise ConfigError(f"loss {self.kind!r} is missing weights {sorted(need - have)}")
            if have - need:
                raise ConfigError(f"loss {self.kind!r} does not take weights {sorted(have - need)}")

    def w(self, name: str) -> float:
        src = LOSS_DEFAULTS[self.kind] if self.weights is None else self.weights
        return float(src[name])


def ssim_expr(a, b: np.ndarray, w: int):
    """Differentiable mean SSIM per sample of real magnitude maps ``(B, H, W)``.

    ``b`` is the reference (constant); the dynamic range is ``max b`` per sample.
    """
    L = np.max(b, axis=(-2, -1), keepdims=True)
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    mu_a, mu_b = ad.box_mean_valid(a, w), ad.box_mean_valid(b, w)
    var_a = ad.sub(ad.box_mean_valid(ad.mul(a, a), w), ad.mul(mu_a, mu_a))
    var_b = ad.box_mean_valid(b * b, w) - mu_b**2
    cov = ad.sub(ad.box_mean_valid(ad.mul(a, b), w), ad.mul(mu_a, mu_b))
    num = ad.mul(ad.add(ad.mul(2.0 * mu_b, mu_a), c1), ad.add(ad.mul(2.0, cov), c2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), mu_b**2), c1), ad.add(ad.add(var_a, var_b), c2))
    return ad.mean(ad.div(num, den), axis=(-2, -1))


def _per_sample_norm(a):
    axes = tuple(range(1, ad.value(a).ndim))
    return ad.norm(a, axis=axes)


def loss_expr(spec: LossSpec, output, ref: np.ndarray, aux=None):
    """Batch-mean loss as an expression (node when ``output`` is a node).

    Parameters
    ----------
    output
        ``(B, C, H, W)`` network output.
    ref : ndarray
        Reference of the same layout (coil images for the multi-coil kinds,
        the triple ``(x1, x2, x3)`` for ``ch5-joint``).
    aux
        Kind-specific extra network outputs: ``J(u)`` for ``ch2-rss``,
        ``(u_bar, J(u_bar))`` for ``ch3-multi``, the synthesised
        ``g([h1(x1*), h2(x2*)])`` for ``ch5-joint``.
    """
    out_v = ad.value(output)
    if out_v.shape != ref.shape:
        raise DimensionMismatchError(f"output shape {out_v.shape} does not match reference {ref.shape}")
    B = out_v.shape[0]
    k = spec.kind
    if k == "recon-l2":
        return ad.mul(0.5 / B, ad.sum_sq(ad.sub(output, ref)))
    if k == "ch2-rss":
        if aux is None:
            raise InvalidInputError("ch2-rss needs the combined image J(u)")
        s_ref = np.sqrt(np.sum(np.abs(ref) ** 2, axis=1, keepdims=True))
        t1 = _per_sample_norm(ad.sub(ad.rss(output, axis=1), s_ref))
        t2 = _per_sample_norm(ad.sub(ad.abs_(aux), s_ref))
        return ad.mul(1.0 / B, ad.sum_(ad.add(t1, ad.mul(spec.w("gamma"), t2))))
    if k == "ch3-multi":
        if aux is None:
            raise InvalidInputError("ch3-multi needs (u_bar, J(u_bar))")
        ubar, jbar = aux
        s_ref = np.sqrt(np.sum(np.abs(ref) ** 2, axis=1, keepdims=True))
        coil = ad.sum_(ad.norm(ad.sub(output, ref), axis=(2, 3)), axis=1)
        t2 = _per_sample_norm(ad.sub(ad.abs_(jbar), s_ref))
        t3 = _per_sample_norm(ad.sub(ad.rss(ubar, axis=1), s_ref))
        per = ad.add(ad.add(ad.mul(spec.w("gamma"), coil), t2), ad.mul(spec.w("eta"), t3))
        return ad.mul(1.0 / B, ad.sum_(per))
    if k == "ch5-joint":
        if out_v.shape[1] != 3:
            raise DimensionMismatchError("ch5-joint expects the (x1, x2, x3) triple on axis 1")
        if aux is None:
            raise InvalidInputError("ch5-joint needs the synthesised third contrast")
        w = ssim_window(out_v.shape)
        l2 = ad.mul(0.5, ad.sum_sq(ad.sub(output, ref)))
        s = ad.sum_(ssim_expr(ad.abs_(output), np.abs(ref), w))
        synth = ad.mul(0.5 * spec.w("mu"), ad.sum_sq(ad.sub(aux, ref[:, 2:3])))
        total = ad.add(ad.sub(ad.add(l2, 3.0 * B), s), synth)
        return ad.mul(1.0 / B, total)
    raise ConfigError(f"unknown loss kind {k!r}")


def _to4d(a) -> tuple[np.ndarray, tuple]:
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim == 2:
        return a[None, None], a.shape
    if a.ndim == 3:
        return a[None], a.shape
    if a.ndim == 4:
        return a, a.shape
    raise DimensionMismatchError(f"expected a 2D to 4D array, got shape {a.shape}")


def loss_eval(spec: LossSpec, output, reference, aux=None) -> tuple[float, np.ndarray]:
    """Loss value and its cotangent with respect to ``output``.

    ``output`` and ``reference`` may be ``(H, W)``, ``(C, H, W)`` or batched.
    ``aux`` entries are held fixed, so for ``ch2-rss``/``ch3-multi`` the
    cotangent covers only the direct dependence on ``output``.  The cotangent
    follows the ``d/dRe + i d/dIm`` convention.
    """
    out4, shape = _to4d(output)
    ref4, _ = _to4d(reference)
    if aux is not None:
        aux = tuple(_to4d(a)[0] for a in aux) if isinstance(aux, tuple) else _to4d(aux)[0]
    node = ad.leaf(out4)
    val = loss_expr(spec, node, ref4, aux)
    grads = ad.backward(val)
    return float(ad.value(val)), ad.grad_of(grads, node).reshape(shape)


# ----------------------------------------------------------------------------
# gradients through unrolled networks


class GradientBundle(dict):
    """Parameter name to gradient, with the loss value attached."""

    def __init__(self, *args, loss: float = math.nan, **kw):
        super().__init__(*args, **kw)
        self.loss = loss

    def max_abs_diff(self, other: "GradientBundle") -> float:
        if set(self) != set(other):
            raise InvalidInputError("bundles cover different parameter sets")
        return max((float(np.max(np.abs(self[k] - other[k]))) if self[k].size else 0.0) for k in self)

    def norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(g, g).real) for g in self.values()))


def _leaves(P: Mapping) -> dict:
    return {k: ad.leaf(v, k) for k, v in P.items()}


def _zero_bundle(P: Mapping, loss: float) -> GradientBundle:
    return GradientBundle({k: np.zeros_like(v) for k, v in P.items()}, loss=loss)


def network_loss(net, P, batch: Batch, spec: LossSpec):
    states = run_network(net, P, batch)
    out, aux = net.readout(P, states[-1], batch)
    return loss_expr(spec, out, batch.ref, aux)


def backprop_unrolled(net, P: Mapping, batch: Batch, spec: LossSpec) -> GradientBundle:
    """Exact gradient of the batch-mean loss by reverse mode over the whole tape."""
    if batch.ref is None:
        raise InvalidInputError("training batches need references")
    L = _leaves(P)
    loss = network_loss(net, L, batch, spec)
    if not isinstance(loss, ad.Node):
        return _zero_bundle(P, float(loss))
    grads = ad.backward(loss)
    return GradientBundle({k: ad.grad_of(grads, L[k]) for k in P}, loss=float(loss.value))


def mlm_gradients(net, P: Mapping, batch: Batch, spec: LossSpec, return_multipliers: bool = False):
    """Parameter gradients from the Lagrangian multiplier recursion.

    With ``u(t) = g_t(u(t-1), theta)`` the multipliers are
    ``lambda(T) = -d loss/d u(T)`` and ``lambda(t-1) = <lambda(t), d_u g_t>``;
    the parameter gradient accumulates ``-<lambda(t), d_theta g_t>`` over the
    phases (and the initial map), plus the direct loss dependence.  Each phase
    is differentiated on its own local tape.
    """
    if batch.ref is None:
        raise InvalidInputError("training batches need references")
    states = run_network(net, P, batch)
    acc = {k: np.zeros_like(v) for k, v in P.items()}

    # terminal multiplier and the direct parameter dependence of the loss
    L = _leaves(P)
    uT = tuple(ad.leaf(s) for s in states[-1])
    out, aux = net.readout(L, uT, batch)
    loss = loss_expr(spec, out, batch.ref, aux)
    if not isinstance(loss, ad.Node):
        res = _zero_bundle(P, float(loss))
        return (res, []) if return_multipliers else res
    grads = ad.backward(loss)
    for k in P:
        acc[k] += ad.grad_of(grads, L[k])
    lam = [-ad.grad_of(grads, n) for n in uT]
    multipliers = [lam]

    for t in range(net.T - 1, -1, -1):
        L = _leaves(P)
        u_prev = tuple(ad.leaf(s) for s in states[t])
        u_next = net.phase(t, L, u_prev, batch)
        grads = ad.backward(list(u_next), lam)
        for k in P:
            acc[k] -= ad.grad_of(grads, L[k])
        lam = [ad.grad_of(grads, n) for n in u_prev]
        multipliers.append(lam)

    L = _leaves(P)
    u0 = net.initial(L, batch)
    nodes = [u for u in u0 if isinstance(u, ad.Node)]
    if nodes:
        seeds = [lam_i for u, lam_i in zip(u0, lam) if isinstance(u, ad.Node)]
        grads = ad.backward(nodes, seeds)
        for k in P:
            acc[k] -= ad.grad_of(grads, L[k])

    bundle = GradientBundle(acc, loss=float(loss.value))
    if return_multipliers:
        return bundle, multipliers[::-1]
    return bundle


def batch_gradients(net, P: Mapping, batch: Batch, spec: LossSpec, workers: int = 1) -> GradientBundle:
    """Backprop gradient of the batch mean, optionally split across threads."""
    if workers <= 1 or batch.size < 2:
        return backprop_unrolled(net, P, batch, spec)
    chunks = [c for c in np.array_split(np.arange(batch.size), min(workers, batch.size)) if len(c)]
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        parts = list(ex.map(lambda idx: backprop_unrolled(net, P, batch.subset(idx), spec), chunks))
    out = GradientBundle({k: np.zeros_like(v) for k, v in P.items()}, loss=0.0)
    for idx, b in zip(chunks, parts):
        frac = len(idx) / batch.size
        for k in out:
            out[k] = out[k] + frac * b[k]
        out.loss += frac * b.loss
    return out


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First and second moments per parameter (complex entries as real pairs)."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, P: Mapping, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        m = {k: np.zeros(_real_view(v).shape) for k, v in P.items()}
        v = {k: np.zeros(_real_view(a).shape) for k, a in P.items()}
        return cls(m, v, 0, beta1, beta2, eps)


def _real_view(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.view(np.float64) if np.iscomplexobj(a) else a.astype(np.float64, copy=False)


def adam_update(P: Mapping, bundle: Mapping, state: AdamState, lr: float = 1e-3,
                frozen: Sequence[str] = ()) -> dict:
    """One bias-corrected Adam step; ``state`` is advanced in place.

    Frozen parameters are left untouched and their moments are not updated.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for k, p in P.items():
        if k in frozen:
            out[k] = p
            continue
        g = _real_view(bundle[k])
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        step = lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
        new = _real_view(p) - step
        out[k] = new.view(np.complex128).reshape(p.shape) if np.iscomplexobj(p) else new.reshape(p.shape)
    return out


# ----------------------------------------------------------------------------
# evaluation helpers


def network_images(net, P: Mapping, batch: Batch) -> np.ndarray:
    """Magnitude-comparable outputs: (B, H, W) images, or (B, 3, H, W) for the joint model."""
    states = run_network(net, P, batch)
    return net.image(states[-1])


def reference_images(net, batch: Batch) -> np.ndarray:
    ref = batch.ref
    if net.kind == "loa":
        return ref[:, 0]
    if net.kind == "joint":
        return ref
    return np.sqrt(np.sum(np.abs(ref) ** 2, axis=1))


def mean_psnr(net, P: Mapping, batch: Batch) -> float:
    out = network_images(net, P, batch)
    ref = reference_images(net, batch)
    if net.kind == "joint":
        vals = [psnr(out[i, j], ref[i, j]) for i in range(out.shape[0]) for j in range(3)]
    else:
        vals = [psnr(out[i], ref[i]) for i in range(out.shape[0])]
    return float(np.mean(vals))


def eval_loss(net, P: Mapping, batch: Batch, spec: LossSpec) -> float:
    return float(ad.value(network_loss(net, P, batch, spec)))


# ----------------------------------------------------------------------------
# conventional training


@dataclass(frozen=True)
class TaskSpec:
    """One sampling task: a mask, its weight logit and train/validation batches."""

    id: int
    mask: SamplingMask | None
    omega: float
    train: Batch
    val: Batch

    def __post_init__(self):
        if self.train.size == 0 or self.val.size == 0:
            raise InvalidInputError(f"task {self.id}: train and validation splits must be nonempty")


@dataclass(frozen=True)
class TrainConfig:
    """Settings of :func:`conventional_train`.

    ``stair=True`` starts from ``stair_start`` phases and adds one whenever
    the relative train-loss improvement over ``stair_patience`` epochs drops
    below ``stair_tol``, up to the network's ``T``.
    """

    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 25
    frozen: tuple = ("omega",)
    stair: bool = False
    stair_start: int = 1
    stair_patience: int = 10
    stair_tol: float = 1e-4
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs and lr must be nonnegative and batch_size positive")


HISTORY_COLUMNS = ["epoch", "phases", "train_loss", "val_loss", "val_psnr"]


@dataclass
class TrainResult:
    net: object
    params: dict
    history: list = field(default_factory=list)
    adam: AdamState | None = None
    initial: dict | None = None


def _freeze_for(net, P, frozen) -> tuple:
    return tuple(k for k in P if k in frozen)


def conventional_train(net, params0: Mapping, task: TaskSpec, loss_spec: LossSpec, cfg: TrainConfig,
                       rng: np.random.Generator, adam: AdamState | None = None,
                       on_epoch: Callable | None = None, start_epoch: int = 0) -> TrainResult:
    """Adam on the training loss of a single task with the weight logit held fixed.

    Each epoch shuffles the training set and steps once per mini-batch.  The
    history holds one row per epoch with the full-set losses after it; the
    row for the initial parameters is kept in ``TrainResult.initial``.
    Passing the ``adam`` state and ``start_epoch`` of an earlier run resumes
    it exactly when ``rng`` is also restored.
    """
    P = {k: np.array(v, copy=True) for k, v in params0.items()}
    train, val = task.train, task.val
    T_final = net.T
    if cfg.stair:
        if not hasattr(net, "extend_params"):
            raise ConfigError(f"stair training is not supported by the {net.kind} network")
        net = net.with_phases(min(cfg.stair_start, T_final))
        P = _truncate(P, net.T)
    if adam is None:
        adam = AdamState.init(P)
    frozen = _freeze_for(net, P, cfg.frozen)

    def row(epoch):
        r = {"epoch": epoch, "phases": net.T, "train_loss": eval_loss(net, P, train, loss_spec)}
        r["val_loss"] = eval_loss(net, P, val, loss_spec)
        r["val_psnr"] = mean_psnr(net, P, val)
        return r

    initial = row(start_epoch)
    rows = [initial]
    last_grow = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        order = rng.permutation(train.size)
        for start in range(0, train.size, cfg.batch_size):
            mb = train.subset(order[start:start + cfg.batch_size])
            g = batch_gradients(net, P, mb, loss_spec, cfg.workers)
            P = adam_update(P, g, adam, cfg.lr, frozen)
        rows.append(row(epoch))
        if on_epoch is not None:
            on_epoch(rows[-1])
        if cfg.stair and net.T < T_final and epoch - last_grow >= cfg.stair_patience:
            old = rows[-1 - cfg.stair_patience]["train_loss"]
            new = rows[-1]["train_loss"]
            if old - new <= cfg.stair_tol * abs(old):
                net = net.with_phases(net.T + 1)
                P = net.extend_params(P, rng, net.T)
                adam = _extend_adam(adam, P)
                last_grow = epoch
    return TrainResult(net, P, rows[1:], adam, initial)


def _truncate(P: dict, T: int) -> dict:
    Q = dict(P)
    for key in ("alpha", "tau"):
        if key in Q:
            Q[key] = Q[key][:T].copy()
    return Q


def _extend_adam(state: AdamState, P: Mapping) -> AdamState:
    for k, v in P.items():
        shape = _real_view(v).shape
        for mom in (state.m, state.v):
            old = mom.get(k)
            if old is None:
                mom[k] = np.zeros(shape)
            elif old.shape != shape:
                grown = np.zeros(shape)
                grown[: old.shape[0]] = old
                mom[k] = grown
    return state


# ----------------------------------------------------------------------------
# bilevel penalty training


@dataclass(frozen=True)
class BilevelConfig:
    """Alternating penalty method settings; defaults are the reference settings.

    ``step_rule`` is ``"adam"`` (per-block Adam states), ``"sgd"`` or
    ``"scaled-sgd"`` (step ``rho / (1 + lambda)``, stable as the penalty
    curvature grows).
    """

    K: int = 1
    rho_theta: float = 1e-3
    rho_omega: float = 1e-3
    delta0: float = 1e-3
    nu_delta: float = 0.95
    delta_tol: float = 4.35e-6
    lambda0: float = 1e-5
    nu_lambda: float = 1.001
    batch_train: int = 8
    batch_val: int = 8
    max_outer: int = 200
    inner_cap: int = 200
    step_rule: str = "adam"

    def __post_init__(self):
        if not (0 < self.nu_delta < 1 < self.nu_lambda):
            raise ConfigError("need 0 < nu_delta < 1 < nu_lambda")
        if self.K < 1 or self.max_outer < 0 or self.inner_cap < 1:
            raise ConfigError("K and inner_cap must be positive, max_outer nonnegative")
        if self.delta0 <= 0 or self.delta_tol < 0 or self.lambda0 < 0:
            raise ConfigError("delta0 must be positive, delta_tol and lambda0 nonnegative")
        if self.step_rule not in ("adam", "sgd", "scaled-sgd"):
            raise ConfigError(f"unknown step rule {self.step_rule!r}")


def delta_at(cfg: BilevelConfig, k: int) -> float:
    return cfg.delta0 * cfg.nu_delta**k


def lambda_at(cfg: BilevelConfig, k: int) -> float:
    return cfg.lambda0 * cfg.nu_lambda**k


def delta_reductions(cfg: BilevelConfig) -> int:
    """Outer reductions until ``delta <= delta_tol``: ``ceil(log(delta_tol/delta0)/log nu)``."""
    if cfg.delta0 <= cfg.delta_tol:
        return 0
    return math.ceil(math.log(cfg.delta_tol / cfg.delta0) / math.log(cfg.nu_delta))


def penalty_objective(problem, theta: np.ndarray, omega: np.ndarray, batch_tr, batch_val, lam: float):
    """``L_val + (lam/2) ||grad_theta L_tr||^2`` with its gradients.

    Second-order terms come from central differences of the training
    gradients along ``v = grad_theta L_tr`` with step
    ``h = sqrt(machine eps) (1 + ||theta||) / ||v||``.

    Returns
    -------
    value, grad_theta, grad_omega
    """
    if lam < 0:
        raise InvalidInputError("penalty weight must be nonnegative")
    _, v, _ = problem.loss_grads(theta, omega, batch_tr)
    lv, gv_t, gv_w = problem.loss_grads(theta, omega, batch_val)
    vn = float(np.linalg.norm(v))
    value = lv + 0.5 * lam * vn * vn
    if lam == 0 or vn == 0:
        return value, gv_t, gv_w
    h = math.sqrt(np.finfo(float).eps) * (1.0 + float(np.linalg.norm(theta))) / vn
    _, gp_t, gp_w = problem.loss_grads(theta + h * v, omega, batch_tr)
    _, gm_t, gm_w = problem.loss_grads(theta - h * v, omega, batch_tr)
    hvp = (gp_t - gm_t) / (2 * h)
    mixed = (gp_w - gm_w) / (2 * h)
    return value, gv_t + lam * hvp, gv_w + lam * mixed


BILEVEL_COLUMNS = ["outer", "delta", "lambda", "inner_steps", "stalled", "penalty", "train_loss",
                   "val_loss", "grad_train_norm"]


@dataclass
class BilevelResult:
    theta: np.ndarray
    omega: np.ndarray
    history: list
    terminated_by: str


class _VecAdam:
    def __init__(self, n: int):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, g: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        mh = self.m / (1 - 0.9**self.t)
        vh = self.v / (1 - 0.999**self.t)
        return lr * mh / (np.sqrt(vh) + 1e-8)


def bilevel_train(problem, theta0: np.ndarray, omega0: np.ndarray, cfg: BilevelConfig,
                  rng: np.random.Generator, on_outer: Callable | None = None) -> BilevelResult:
    """Stochastic alternating penalty method for the bilevel task-weight problem.

    Outer iteration ``k`` uses ``delta_k = delta0 nu_delta^k`` and
    ``lambda_k = lambda0 nu_lambda^k``.  The inner loop draws fresh batches,
    takes ``K`` theta-steps and one omega-step, and stops once the squared
    norms of both penalty gradients fall below ``delta_k`` (or after
    ``inner_cap`` rounds, recorded as a stall).  Training ends once
    ``delta <= delta_tol`` or after ``max_outer`` iterations.
    """
    theta = np.array(theta0, dtype=float, copy=True)
    omega = np.array(omega0, dtype=float, copy=True)
    opt_t, opt_w = _VecAdam(theta.size), _VecAdam(omega.size)
    history = []
    terminated = "max-outer"
    k = 0
    while k < cfg.max_outer:
        delta, lam = delta_at(cfg, k), lambda_at(cfg, k)
        if delta <= cfg.delta_tol:
            terminated = "tolerance"
            break
        stalled = True
        steps = 0
        pen = math.nan
        for steps in range(1, cfg.inner_cap + 1):
            btr = problem.sample(rng, "train", cfg.batch_train)
            bval = problem.sample(rng, "val", cfg.batch_val)
            for _ in range(cfg.K):
                _, gt, _ = penalty_objective(problem, theta, omega, btr, bval, lam)
                theta = theta - _step(cfg, opt_t, gt, cfg.rho_theta, lam)
            pen, gt, gw = penalty_objective(problem, theta, omega, btr, bval, lam)
            omega = omega - _step(cfg, opt_w, gw, cfg.rho_omega, lam)
            pen, gt, gw = penalty_objective(problem, theta, omega, btr, bval, lam)
            if float(gt @ gt + gw @ gw) < delta:
                stalled = False
                break
        ltr, gtr, _ = problem.loss_grads(theta, omega, problem.sample(rng, "train", cfg.batch_train))
        lval, _, _ = problem.loss_grads(theta, omega, problem.sample(rng, "val", cfg.batch_val))
        rec = {
            "outer": k, "delta": delta, "lambda": lam, "inner_steps": steps, "stalled": int(stalled),
            "penalty": pen, "train_loss": ltr, "val_loss": lval, "grad_train_norm": float(np.linalg.norm(gtr)),
        }
        if on_outer is not None:
            rec.update(on_outer(theta, omega) or {})
        history.append(rec)
        k += 1
    else:
        if delta_at(cfg, k) <= cfg.delta_tol:
            terminated = "tolerance"
    return BilevelResult(theta, omega, history, terminated)


def _step(cfg: BilevelConfig, opt: _VecAdam, g: np.ndarray, rho: float, lam: float) -> np.ndarray:
    if cfg.step_rule == "adam":
        return opt.step(g, rho)
    if cfg.step_rule == "scaled-sgd":
        return rho / (1.0 + lam) * g
    return rho * g


@dataclass(frozen=True)
class QuadraticToy:
    """Consistent quadratic bilevel problem with closed-form lower level.

    ``L_tr = 1/2 ||theta - omega a||^2`` (minimiser ``theta = omega a``) and
    ``L_val = 1/2 (<c, theta> - s)^2``; the pair ``omega* = s / <c, a>``,
    ``theta* = omega* a`` zeroes both.
    """

    a: np.ndarray
    c: np.ndarray
    s: float

    def sample(self, rng, split: str, size: int):
        return split

    def loss_grads(self, theta, omega, batch):
        if batch == "train":
            r = theta - omega[0] * self.a
            return 0.5 * float(r @ r), r, np.array([-float(r @ self.a)])
        e = float(self.c @ theta) - self.s
        return 0.5 * e * e, e * self.c, np.zeros(1)

    def lower_minimizer(self, omega) -> np.ndarray:
        return omega[0] * self.a


class ParamPacker:
    """Flattens a parameter dict (complex entries as real pairs) into one real vector."""

    def __init__(self, template: Mapping, keys: Sequence[str]):
        self.keys = list(keys)
        self.shapes = {k: np.asarray(template[k]).shape for k in self.keys}
        self.complex = {k: np.iscomplexobj(template[k]) for k in self.keys}
        self.sizes = {k: _real_view(np.asarray(template[k])).size for k in self.keys}

    def pack(self, P: Mapping) -> np.ndarray:
        return np.concatenate([_real_view(np.asarray(P[k])).ravel() for k in self.keys]) if self.keys else np.zeros(0)

    def unpack(self, vec: np.ndarray) -> dict:
        out, i = {}, 0
        for k in self.keys:
            n = self.sizes[k]
            chunk = np.array(vec[i:i + n], dtype=np.float64)
            out[k] = chunk.view(np.complex128).reshape(self.shapes[k]) if self.complex[k] else chunk.reshape(self.shapes[k])
            i += n
        return out


class NetworkProblem:
    """Bilevel problem over an unrolled LOA network and a list of tasks.

    ``theta`` packs every parameter except the task logits ``omega``.
    """

    def __init__(self, net, params: Mapping, tasks: Sequence[TaskSpec], loss_spec: LossSpec, workers: int = 1):
        if not tasks:
            raise InvalidInputError("bilevel training needs at least one task")
        if "omega" not in params:
            raise ConfigError("network has no task weight logits")
        self.net, self.loss_spec, self.workers = net, loss_spec, workers
        self.tasks = list(tasks)
        self.pool = {"train": concat_batches([t.train for t in tasks]), "val": concat_batches([t.val for t in tasks])}
        self.packer = ParamPacker(params, [k for k in params if k != "omega"])

    def params(self, theta, omega) -> dict:
        P = self.packer.unpack(theta)
        P["omega"] = np.asarray(omega, dtype=float)
        return P

    def sample(self, rng, split: str, size: int) -> Batch:
        pool = self.pool[split]
        idx = rng.choice(pool.size, size=min(size, pool.size), replace=False)
        return pool.subset(np.sort(idx))

    def loss_grads(self, theta, omega, batch: Batch):
        g = batch_gradients(self.net, self.params(theta, omega), batch, self.loss_spec, self.workers)
        return g.loss, self.packer.pack(g), np.asarray(g["omega"], dtype=float)
