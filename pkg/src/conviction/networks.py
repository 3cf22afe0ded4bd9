"""Unrolled network families.

Each network is a frozen description plus a parameter dictionary mapping
names to arrays.  Networks expose the phase structure explicitly:

``initial(P, batch)``
    initial state (a tuple of arrays or tape nodes)
``phase(t, P, state, batch)``
    state after phase ``t``
``readout(P, state, batch)``
    ``(output, aux)`` consumed by the loss

Because phases are explicit, the Lagrangian multiplier recursion can run one
phase at a time while backpropagation runs over the whole tape.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .conv import check_mode
from .data import Batch
from .errors import DimensionMismatchError, InvalidInputError
from .regularizer import stack_forward, xavier_kernel
from .solver import (
    descent_phase_expr,
    hybrid_phase_expr,
    learned_init_expr,
    loa_phase_expr,
    prox_phase_expr,
    reg_grads_expr,
    smooth_grads_expr,
)


def _stack_init(rng, prefix: str, channels, k: int) -> dict:
    return {
        f"{prefix}.{i}": xavier_kernel(rng, co, ci, k)
        for i, (ci, co) in enumerate(zip(channels[:-1], channels[1:]))
    }


def _layers(P: Mapping, prefix: str, depth: int) -> list:
    return [P[f"{prefix}.{i}"] for i in range(depth)]


def _zero_filled(batch: Batch) -> np.ndarray:
    return np.fft.ifft2(batch.y_dense, norm="ortho")


def _kappa(P: Mapping, batch: Batch):
    w = ad.sigmoid(ad.take(P["omega"], batch.task, axis=0))
    return ad.reshape(w, (batch.size, 1, 1, 1))


# ----------------------------------------------------------------------------
# LOA-induced network


@dataclass(frozen=True)
class LOANet:
    """Network unrolling the learnable optimization algorithm for ``T`` phases.

    ``scheme="loa"`` runs the residual candidate update of every phase
    (``z = x - alpha_t grad f``, ``x+ = z - tau_t sigmoid(omega) grad r_eps_t(z)``);
    ``scheme="v"`` runs plain gradient steps on ``phi_eps_t``.  The smoothing
    follows ``eps_t = eps0 gamma^t`` unless an explicit schedule is given.
    """

    T: int = 3
    depth: int = 3
    features: int = 4
    kernel_size: int = 3
    delta: float = 1e-3
    mode: str = "complex"
    eps0: float = 1e-3
    gamma: float = 0.9
    alpha0: float = 0.01
    tau0: float = 0.01
    omega0: float = 0.0
    share: bool = True
    scheme: str = "loa"
    n_tasks: int = 1
    eps_schedule: tuple | None = None

    kind = "loa"

    def __post_init__(self):
        if self.T < 0:
            raise InvalidInputError("phase count must be nonnegative")
        if self.scheme not in ("loa", "v"):
            raise InvalidInputError(f"unknown scheme {self.scheme!r}")
        check_mode(self.mode)
        if self.eps_schedule is not None and len(self.eps_schedule) < self.T:
            raise InvalidInputError("explicit smoothing schedule is shorter than T")

    def with_phases(self, T: int) -> "LOANet":
        return replace(self, T=T)

    def channels(self):
        return [1] + [self.features] * self.depth

    def g_prefix(self, t: int) -> str:
        return "g" if self.share else f"g{t}"

    def init_params(self, rng: np.random.Generator) -> dict:
        P = {}
        if self.share:
            P.update(_stack_init(rng, "g", self.channels(), self.kernel_size))
        else:
            for t in range(self.T):
                P.update(_stack_init(rng, f"g{t}", self.channels(), self.kernel_size))
        P["alpha"] = np.full(self.T, self.alpha0)
        if self.scheme == "loa":
            P["tau"] = np.full(self.T, self.tau0)
        P["omega"] = np.full(self.n_tasks, self.omega0)
        return P

    def extend_params(self, P: dict, rng: np.random.Generator, T_new: int) -> dict:
        """Parameters for ``T_new`` phases, keeping the trained ones."""
        Q = dict(P)
        old = len(P["alpha"])
        grow = T_new - old
        if grow < 0:
            raise InvalidInputError("can only add phases")
        for key in ("alpha", "tau"):
            if key in P:
                fill = P[key][-1] if old else (self.alpha0 if key == "alpha" else self.tau0)
                Q[key] = np.concatenate([P[key], np.full(grow, fill)])
        if not self.share:
            for t in range(old, T_new):
                src = f"g{old - 1}" if old else None
                for i in range(self.depth):
                    Q[f"g{t}.{i}"] = P[f"{src}.{i}"].copy() if src else xavier_kernel(
                        rng, self.channels()[i + 1], self.channels()[i], self.kernel_size)
        return Q

    def eps_at(self, t: int) -> float:
        if self.eps_schedule is not None:
            return float(self.eps_schedule[t])
        return self.eps0 * self.gamma**t

    def initial(self, P, batch: Batch):
        return (_zero_filled(batch),)

    def phase(self, t: int, P, state, batch: Batch):
        (x,) = state
        ws = _layers(P, self.g_prefix(t), self.depth)
        kappa = _kappa(P, batch)
        alpha = ad.take(P["alpha"], t, axis=0)
        eps = self.eps_at(t)
        if self.scheme == "loa":
            tau = ad.take(P["tau"], t, axis=0)
            return (loa_phase_expr(x, batch.mask_f, batch.y_dense, ws, kappa, eps, alpha, tau, self.delta, self.mode),)
        return (descent_phase_expr(x, batch.mask_f, batch.y_dense, ws, kappa, eps, alpha, self.delta, self.mode),)

    def readout(self, P, state, batch: Batch):
        return state[0], None

    def image(self, state) -> np.ndarray:
        """Single reconstructed image per sample, (B, H, W)."""
        return ad.value(state[0])[:, 0]


# ----------------------------------------------------------------------------
# combine-then-regularize proximal network


@dataclass(frozen=True)
class ProxNet:
    """Multi-coil proximal network with residual shrinkage phases.

    Phase ``t``: ``b = u - rho_t F^H P^T (P F u - f)`` and
    ``u+ = b + Jt(Gt(S_alpha_t(G(J(b)))))``.  Every phase owns its stacks.
    """

    T: int = 5
    coils: int = 2
    j_depth: int = 4
    j_features: int = 8
    j_kernel: int = 3
    g_depth: int = 3
    g_features: int = 8
    g_kernel: int = 9
    delta: float = 1e-3
    mode: str = "split-real"
    rho0: float = 0.1
    alpha0: float = 0.0

    kind = "prox"

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError("the proximal network needs at least one phase")
        check_mode(self.mode)

    def with_phases(self, T: int) -> "ProxNet":
        return replace(self, T=T)

    def _shapes(self):
        jf, gf, nc = self.j_features, self.g_features, self.coils
        return {
            "J": ([nc] + [jf] * (self.j_depth - 1) + [1], self.j_kernel),
            "G": ([1] + [gf] * self.g_depth, self.g_kernel),
            "Gt": ([gf] * self.g_depth + [1], self.g_kernel),
            "Jt": ([1] + [jf] * (self.j_depth - 1) + [nc], self.j_kernel),
        }

    def init_params(self, rng: np.random.Generator) -> dict:
        P = {}
        for t in range(self.T):
            for name, (ch, k) in self._shapes().items():
                P.update(_stack_init(rng, f"{name}{t}", ch, k))
        P["rho"] = np.full(self.T, self.rho0)
        P["alpha"] = np.full(self.T, self.alpha0)
        return P

    def _stack(self, P, name: str, t: int):
        depth = self.j_depth if name in ("J", "Jt") else self.g_depth
        return _layers(P, f"{name}{t}", depth)

    def initial(self, P, batch: Batch):
        return (_zero_filled(batch),)

    def phase(self, t: int, P, state, batch: Batch):
        (u,) = state
        if ad.value(u).shape[1] != self.coils:
            raise DimensionMismatchError("coil count does not match the network")
        rho = ad.take(P["rho"], t, axis=0)
        b = ad.sub(u, ad.mul(rho, ad.fidelity_grad(u, batch.mask_f, batch.y_dense)))
        alpha = ad.take(P["alpha"], t, axis=0)
        out = prox_phase_expr(
            b, self._stack(P, "J", t), self._stack(P, "G", t), self._stack(P, "Gt", t),
            self._stack(P, "Jt", t), alpha, self.delta, self.mode,
        )
        return (out,)

    def combine(self, P, u):
        v, _ = stack_forward(self._stack(P, "J", self.T - 1), u, self.delta, self.mode)
        return v

    def readout(self, P, state, batch: Batch):
        return state[0], self.combine(P, state[0])

    def image(self, state, P=None) -> np.ndarray:
        u = ad.value(state[0])
        return np.sqrt(np.sum(np.abs(u) ** 2, axis=1))


# ----------------------------------------------------------------------------
# hybrid-domain network


@dataclass(frozen=True)
class HybridNet:
    """Multi-coil network alternating image- and k-space residual blocks.

    ``b = u - rho_t F^H P^T (P F u - f)``, ``u_bar = b + M(b)``,
    ``u+ = u_bar + F^H K(F u_bar)``.  ``M`` is shared by every ``share_every``
    consecutive phases; ``K`` is per phase.  The initial state is the learned
    ``F^H (f + K0(f))``.  The state carries ``(u, u_bar)`` so the loss can use
    the last ``u_bar``.
    """

    T: int = 4
    coils: int = 2
    j_depth: int = 3
    j_features: int = 8
    g_depth: int = 3
    g_features: int = 8
    k_depth: int = 3
    k_features: int = 8
    kernel_size: int = 3
    share_every: int = 2
    delta: float = 1e-3
    mode: str = "complex"
    rho0: float = 1.0

    kind = "hybrid"

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError("the hybrid network needs at least one phase")
        if self.share_every < 1:
            raise InvalidInputError("share_every must be positive")
        check_mode(self.mode)

    def with_phases(self, T: int) -> "HybridNet":
        return replace(self, T=T)

    def n_blocks(self) -> int:
        return (self.T + self.share_every - 1) // self.share_every

    def init_params(self, rng: np.random.Generator) -> dict:
        jf, gf, kf, nc, k = self.j_features, self.g_features, self.k_features, self.coils, self.kernel_size
        P = {}
        for m in range(self.n_blocks()):
            P.update(_stack_init(rng, f"M{m}.J", [nc] + [jf] * (self.j_depth - 1) + [1], k))
            P.update(_stack_init(rng, f"M{m}.G", [1] + [gf] * self.g_depth, k))
            P.update(_stack_init(rng, f"M{m}.Gt", [gf] * self.g_depth + [1], k))
            P.update(_stack_init(rng, f"M{m}.Jt", [1] + [jf] * (self.j_depth - 1) + [nc], k))
        kch = [nc] + [kf] * (self.k_depth - 1) + [nc]
        for t in range(self.T):
            P.update(_stack_init(rng, f"K{t}", kch, k))
        P.update(_stack_init(rng, "K0", kch, k))
        P["rho"] = np.full(self.T, self.rho0)
        return P

    def _M(self, P, t: int):
        m = t // self.share_every
        return (
            _layers(P, f"M{m}.J", self.j_depth),
            _layers(P, f"M{m}.G", self.g_depth),
            _layers(P, f"M{m}.Gt", self.g_depth),
            _layers(P, f"M{m}.Jt", self.j_depth),
        )

    def initial(self, P, batch: Batch):
        u0 = learned_init_expr(batch.y_dense, _layers(P, "K0", self.k_depth), self.delta, self.mode)
        return (u0, u0)

    def phase(self, t: int, P, state, batch: Batch):
        u = state[0]
        if ad.value(u).shape[1] != self.coils:
            raise DimensionMismatchError("coil count does not match the network")
        rho = ad.take(P["rho"], t, axis=0)
        return hybrid_phase_expr(
            u, batch.mask_f, batch.y_dense, rho, self._M(P, t), _layers(P, f"K{t}", self.k_depth),
            self.delta, self.mode,
        )

    def combine(self, P, u):
        v, _ = stack_forward(self._M(P, self.T - 1)[0], u, self.delta, self.mode)
        return v

    def readout(self, P, state, batch: Batch):
        u, ubar = state
        return u, (ubar, self.combine(P, ubar))

    def image(self, state, P=None) -> np.ndarray:
        u = ad.value(state[0])
        return np.sqrt(np.sum(np.abs(u) ** 2, axis=1))


# ----------------------------------------------------------------------------
# joint reconstruction and synthesis network


@dataclass(frozen=True)
class JointNet:
    """Unrolled gradient descent on the joint reconstruction/synthesis model.

    Variables ``(x1, x2, x3)``: the first two have k-space data, the third is
    tied to them through ``(gamma/2) ||g([h1(x1), h2(x2)]) - x3||^2``.  Every
    variable carries an unweighted smoothed regularizer ``r_eps(h_i(x_i))``.
    Phase ``t`` is ``X - alpha_t grad Psi_eps_t(X)``.  The initial ``x1, x2``
    are zero-filled and ``x3`` is synthesised from them.
    """

    T: int = 3
    h_depth: int = 4
    h_features: int = 8
    g_depth: int = 6
    g_features: int = 8
    kernel_size: int = 3
    delta: float = 1e-3
    mode: str = "complex"
    coupling_weight: float = 1.0
    eps0: float = 1e-3
    gamma: float = 0.9
    alpha0: float = 0.01

    kind = "joint"

    def __post_init__(self):
        if self.T < 0:
            raise InvalidInputError("phase count must be nonnegative")
        check_mode(self.mode)

    def with_phases(self, T: int) -> "JointNet":
        return replace(self, T=T)

    def init_params(self, rng: np.random.Generator) -> dict:
        d, k = self.h_features, self.kernel_size
        P = {}
        for name in ("h1", "h2", "h3"):
            P.update(_stack_init(rng, name, [1] + [d] * self.h_depth, k))
        P.update(_stack_init(rng, "gt", [2 * d] + [self.g_features] * (self.g_depth - 1) + [1], k))
        P["alpha"] = np.full(self.T, self.alpha0)
        return P

    def _h(self, P, i: int):
        return _layers(P, f"h{i}", self.h_depth)

    def _g(self, P):
        return _layers(P, "gt", self.g_depth)

    def synthesize(self, P, x1, x2):
        F1, _ = stack_forward(self._h(P, 1), x1, self.delta, self.mode)
        F2, _ = stack_forward(self._h(P, 2), x2, self.delta, self.mode)
        out, _ = stack_forward(self._g(P), ad.concat([F1, F2], axis=1), self.delta, self.mode)
        return out

    def initial(self, P, batch: Batch):
        x0 = _zero_filled(batch)
        x1, x2 = x0[:, 0:1], x0[:, 1:2]
        return (x1, x2, self.synthesize(P, x1, x2))

    def phase(self, t: int, P, state, batch: Batch):
        xs = list(state)
        data = [
            (batch.mask_f[:, 0:1], batch.y_dense[:, 0:1]),
            (batch.mask_f[:, 1:2], batch.y_dense[:, 1:2]),
            None,
        ]
        coupling = (self._h(P, 1), self._h(P, 2), self._g(P), self.coupling_weight, 2)
        eps = self.eps0 * self.gamma**t
        gf = smooth_grads_expr(xs, data, coupling, self.delta, self.mode)
        regs = [(self._h(P, i), 1.0) for i in (1, 2, 3)]
        gR = reg_grads_expr(xs, regs, eps, self.delta, self.mode)
        alpha = ad.take(P["alpha"], t, axis=0)
        return tuple(ad.sub(x, ad.mul(alpha, ad.add(a, b))) for x, a, b in zip(xs, gf, gR))

    def readout(self, P, state, batch: Batch):
        out = ad.concat(list(state), axis=1)
        ref = batch.ref
        aux = self.synthesize(P, ref[:, 0:1], ref[:, 1:2])
        return out, aux

    def image(self, state, P=None) -> np.ndarray:
        return np.concatenate([ad.value(s) for s in state], axis=1)


NETWORKS = {"loa": LOANet, "prox": ProxNet, "hybrid": HybridNet, "joint": JointNet}


def run_network(net, P, batch: Batch, T: int | None = None) -> list:
    """States ``[s_0, ..., s_T]``; values are nodes when ``P`` holds nodes."""
    T = net.T if T is None else T
    states = [net.initial(P, batch)]
    for t in range(T):
        states.append(net.phase(t, P, states[-1], batch))
    return states
