"""Quadratic log-sum-exp bound, posterior moments and the evidence lower bound.

Every latent node i contributes E_q[log p(x_i | parents)] = E[z_{x_i}] - E[LSE(z)].
The log-sum-exp is bounded above in two stages: a product of sigmoids with a
free shift alpha, then the Jaakkola quadratic bound on each log(1 + e^t) with
its own xi.  Minimising over alpha in closed form gives alpha_hat, which is a
linear function of z, so the expectation of the bound only needs first and
second moments of the logits under the factorised posterior.

Arrays are vectorised over locations: node posteriors are ``(L, M_i + 1)``
arrays, evidence vectors have length L.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import LOG_2PI, CausalNetwork, WeightSet

XI_SERIES = 1e-6
DXI_SERIES = 1e-2
FP_TOL = 1e-8
FP_MAXITER = 100


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def lambda_xi(xi):
    """Jaakkola coefficient (sigmoid(xi) - 1/2) / (2 xi), equal to tanh(xi/2) / (4 xi).

    Uses the series 1/8 - xi^2/96 below 1e-6.
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise ValueError("xi must be >= 0")
    small = xi < XI_SERIES
    safe = np.where(small, 1.0, xi)
    out = np.where(small, 0.125 - xi * xi / 96.0, np.tanh(0.5 * safe) / (4.0 * safe))
    return out if out.ndim else float(out)


def dlambda_dxi(xi):
    """Derivative of lambda_xi; series -xi/48 + xi^3/240 below 1e-2."""
    xi = np.asarray(xi, dtype=float)
    small = xi < DXI_SERIES
    s = np.where(small, 1.0, xi)
    th = np.tanh(0.5 * s)
    sech2 = 1.0 - th * th
    big = (0.5 * s * sech2 - th) / (4.0 * s * s)
    out = np.where(small, -xi / 48.0 + xi**3 / 240.0, big)
    return out if out.ndim else float(out)


def lse_upper_bound(z, alpha: float, xi) -> float:
    """Two-stage quadratic upper bound on log(sum(exp(z))) for one logit vector."""
    z = np.asarray(z, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if z.shape != xi.shape:
        raise ValueError(f"length mismatch: z has {z.shape}, xi has {xi.shape}")
    lam = lambda_xi(xi)
    t = z - alpha
    return float(alpha + np.sum(lam * (t * t - xi * xi) + 0.5 * (t - xi) + _log1pexp(xi)))


def optimal_alpha(ez, lam, M: int) -> float:
    """Closed-form minimiser of the bound over alpha: (4 sum(lam ez) + M - 1) / (4 sum(lam))."""
    ez = np.asarray(ez, dtype=float)
    lam = np.asarray(lam, dtype=float)
    tot = float(np.sum(lam))
    if tot == 0.0:
        raise ValueError("sum of lambda is zero")
    return (4.0 * float(np.dot(ez, lam)) - (1 - M)) / (4.0 * tot)


def bound_at_alpha_hat(z, xi) -> float:
    """Bound value at alpha_hat(z): -Lam a^2 + sum(lam (z^2 - xi^2)) + (z - xi)/2 + log1pexp(xi)."""
    z = np.asarray(z, dtype=float)
    xi = np.asarray(xi, dtype=float)
    lam = lambda_xi(xi)
    a = optimal_alpha(z, lam, z.size - 1)
    return float(-lam.sum() * a * a + np.sum(lam * (z * z - xi * xi) + 0.5 * (z - xi) + _log1pexp(xi)))


def minimize_xi_fixedpoint(ez, ez2, alpha, ezz=None, tol: float = FP_TOL, maxiter: int = FP_MAXITER):
    """Tightest xi for one logit vector.

    With a fixed ``alpha`` the optimum is xi_m = sqrt(E[(z_m - alpha)^2]) in
    closed form.  With ``alpha=None`` the shift is alpha_hat(z) itself, which
    depends on xi through lambda; then ``ezz`` (full second-moment matrix, with
    E[z_m^2] on the diagonal) is required and the closed form is iterated to a
    fixed point.  Every iteration cannot loosen the expected bound.

    Returns
    -------
    xi : ndarray
    converged : bool
    """
    ez = np.asarray(ez, dtype=float)
    ez2 = np.asarray(ez2, dtype=float)
    if alpha is not None:
        return np.sqrt(np.maximum(ez2 - 2.0 * alpha * ez + alpha * alpha, 0.0)), True
    if ezz is None:
        raise ValueError("ezz is required when alpha is None")
    ezz = np.array(ezz, dtype=float)
    np.fill_diagonal(ezz, ez2)
    M = ez.size - 1
    xi = np.sqrt(np.maximum(ez2, 0.0))
    for _ in range(maxiter):
        lam = lambda_xi(xi)
        Lam = lam.sum()
        c = lam / Lam
        d = (M - 1) / (4.0 * Lam)
        ea2 = c @ ezz @ c + 2.0 * d * (c @ ez) + d * d
        eza = ezz @ c + d * ez
        new = np.sqrt(np.maximum(ez2 - 2.0 * eza + ea2, 0.0))
        if np.max(np.abs(new - xi)) < tol:
            return new, True
        xi = new
    return xi, False


def xi_stationarity_residual(xi, ez, ez2, alpha) -> np.ndarray:
    """E[(z - alpha)^2] - xi^2, zero at the optimum for fixed alpha."""
    xi = np.asarray(xi, dtype=float)
    return np.asarray(ez2) - 2.0 * alpha * np.asarray(ez) + alpha * alpha - xi * xi


# --------------------------------------------------------------------------
# evidence and moments


@dataclass(frozen=True)
class Evidence:
    """Per-location observed quantities for a set of locations.

    log_y    log of the clamped DPM value
    u        XOR observation (0 everywhere in practice)
    offsets  prior log-odds per prior-attached node, shape (L, M_i + 1)
    index    location ids, used for ordering and reporting
    """

    log_y: np.ndarray
    u: np.ndarray
    offsets: Mapping[str, np.ndarray] = field(default_factory=dict)
    index: np.ndarray | None = None

    def __post_init__(self):
        ly = np.asarray(self.log_y, dtype=float).reshape(-1)
        object.__setattr__(self, "log_y", ly)
        u = np.broadcast_to(np.asarray(self.u, dtype=float), ly.shape).copy()
        object.__setattr__(self, "u", u)
        idx = np.arange(ly.size) if self.index is None else np.asarray(self.index, dtype=np.int64)
        object.__setattr__(self, "index", idx)
        object.__setattr__(self, "offsets", {k: np.asarray(v, dtype=float) for k, v in self.offsets.items()})

    def __len__(self) -> int:
        return self.log_y.size

    def take(self, sel) -> "Evidence":
        return Evidence(
            self.log_y[sel], self.u[sel], {k: v[sel] for k, v in self.offsets.items()}, self.index[sel]
        )


@dataclass(frozen=True)
class MomentCache:
    """Logit moments of one node at one location."""

    ez: np.ndarray
    ez2: np.ndarray
    ezz: np.ndarray
    ealpha2: float


def state_moments(q: np.ndarray):
    """Mean, second moment and variance of the numeric state under q, per row."""
    vals = np.arange(q.shape[-1], dtype=float)
    mu = q @ vals
    s = q @ (vals * vals)
    return mu, s, s - mu * mu


class NodeTerms:
    """Vectorised moments and bound quantities for one latent node.

    Built from the posteriors of the node's parents; everything the ELBO, the
    E-step logits and the gradients need is kept here so it is computed once.
    """

    __slots__ = (
        "node", "M", "a", "W", "n", "pmu", "pv", "ez", "ez2", "xi", "lam", "Lam",
        "c", "d", "abar", "beta", "ea2", "parents",
    )

    def __init__(self, net: CausalNetwork, w: WeightSet, node: str, q: Mapping[str, np.ndarray],
                 ev: Evidence, xi: np.ndarray, pstats: Mapping[str, tuple]):
        L = len(ev)
        self.node = node
        self.M = net.M(node)
        self.parents = net.parents[node]
        a = np.broadcast_to(w.leak[node], (L, self.M + 1))
        if node in ev.offsets and node in w.prior:
            a = a + w.prior[node] * ev.offsets[node]
        self.a = a
        self.W = [w.parent[(k, node)] for k in self.parents]
        self.n = w.noise[node]
        self.pmu = [pstats[k][0] for k in self.parents]
        self.pv = [pstats[k][2] for k in self.parents]
        ez = a.copy()
        ez2 = np.zeros_like(ez)
        for Wk, mu, v in zip(self.W, self.pmu, self.pv):
            ez += mu[:, None] * Wk
            ez2 += v[:, None] * (Wk * Wk)
        ez2 += ez * ez + self.n * self.n
        self.ez, self.ez2 = ez, ez2
        self.xi = xi
        lam = lambda_xi(xi)
        Lam = lam.sum(axis=1)
        self.lam, self.Lam = lam, Lam
        c = lam / Lam[:, None]
        self.c = c
        self.d = (self.M - 1) / (4.0 * Lam)
        self.abar = np.einsum("lm,lm->l", c, ez) + self.d
        self.beta = [c @ Wk for Wk in self.W]
        ea2 = self.abar**2 + (c * c) @ (self.n * self.n)
        for b, v in zip(self.beta, self.pv):
            ea2 = ea2 + b * b * v
        self.ea2 = ea2

    def ez_alpha(self) -> np.ndarray:
        """E[z_m alpha_hat], shape (L, M + 1)."""
        out = self.ez * self.abar[:, None] + self.c * (self.n * self.n)
        for Wk, b, v in zip(self.W, self.beta, self.pv):
            out = out + Wk * (b * v)[:, None]
        return out

    def sq_dev(self) -> np.ndarray:
        """E[(z_m - alpha_hat)^2], shape (L, M + 1)."""
        return self.ez2 - 2.0 * self.ez_alpha() + self.ea2[:, None]

    def latent(self, q_self: np.ndarray, weighting: str = "posterior") -> np.ndarray:
        """Per-location lower bound on E_q[log p(x_i | parents)]."""
        if weighting == "posterior":
            lin = np.einsum("lm,lm->l", q_self, self.ez)
        elif weighting == "printed":
            lin = np.einsum("lm,lm->l", q_self * np.arange(self.M + 1), self.ez)
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        xi = self.xi
        const = np.sum(_log1pexp(xi) - self.lam * xi * xi - 0.5 * xi, axis=1)
        return (lin + self.Lam * self.ea2 - np.sum(self.lam * self.ez2, axis=1)
                - 0.5 * np.sum(self.ez, axis=1) - const)


def parent_stats(net: CausalNetwork, q: Mapping[str, np.ndarray]) -> dict:
    return {k: state_moments(q[k]) for k in net.latent}


def node_terms(net: CausalNetwork, w: WeightSet, q, ev: Evidence, xi, pstats=None) -> dict:
    pstats = parent_stats(net, q) if pstats is None else pstats
    return {i: NodeTerms(net, w, i, q, ev, xi[i], pstats) for i in net.latent}


def expected_moments(q: Mapping[str, np.ndarray], w: WeightSet, net: CausalNetwork, node: str,
                     xi, offset=None) -> MomentCache:
    """Moments of the logits of ``node`` at a single location.

    ``q`` maps each parent to its probability vector; ``xi`` is the node's xi
    vector (needed for E[alpha_hat^2]); ``offset`` is the raw prior log-odds.
    """
    for k in net.parents[node]:
        qk = np.asarray(q[k], dtype=float)
        if abs(qk.sum() - 1.0) > 1e-9 or np.any(qk < 0):
            raise ValueError(f"posterior of {k!r} is not normalized")
    offs = {} if offset is None else {node: np.asarray(offset, dtype=float)[None, :]}
    ev = Evidence(np.zeros(1), np.zeros(1), offs)
    qq = {k: np.asarray(v, dtype=float)[None, :] for k, v in q.items()}
    pst = {k: state_moments(qq[k]) for k in net.parents[node]}
    t = NodeTerms(net, w, node, qq, ev, np.asarray(xi, dtype=float)[None, :], pst)
    ezz = np.outer(t.ez[0], t.ez[0])
    for Wk, v in zip(t.W, t.pv):
        ezz += np.outer(Wk, Wk) * v[0]
    ezz[np.diag_indices_from(ezz)] = t.ez2[0]
    return MomentCache(t.ez[0], t.ez2[0], ezz, float(t.ea2[0]))


def obs_stats(net: CausalNetwork, w: WeightSet, q):
    """A_k = E[w_obs[k, x_k] x_k] and b_k = E[(w_obs[k, x_k] x_k)^2] per obs parent."""
    A, B = {}, {}
    for k in net.obs_parents:
        g = w.obs[k] * np.arange(net.card[k])
        A[k] = q[k] @ g
        B[k] = q[k] @ (g * g)
    return A, B


def obs_quadratic(net, w, q, ev: Evidence):
    """E[(ln y - mu)^2] and the residual r = ln y - w0."""
    r = ev.log_y - w.obs_leak
    A, B = obs_stats(net, w, q)
    sa = np.zeros_like(r)
    sb = np.zeros_like(r)
    sa2 = np.zeros_like(r)
    for k in net.obs_parents:
        sa = sa + A[k]
        sb = sb + B[k]
        sa2 = sa2 + A[k] * A[k]
    Q = r * r - 2.0 * r * sa + sb + sa * sa - sa2
    return Q, r, A, sa


def obs_term(net, w, q, ev: Evidence) -> np.ndarray:
    Q, *_ = obs_quadratic(net, w, q, ev)
    s = w.obs_noise
    return -ev.log_y - math.log(abs(s)) - 0.5 * LOG_2PI - Q / (2.0 * s * s)


def xor_term(net, w, q, ev: Evidence) -> np.ndarray:
    if not net.xor_parents:
        return np.zeros(len(ev))
    k1, k2 = net.xor_parents
    m1, s1, _ = state_moments(q[k1])
    m2, s2, _ = state_moments(q[k2])
    sig2 = w.sigma_xor**2
    u = ev.u
    return -0.5 * math.log(2.0 * math.pi * sig2) - (u * u - 2.0 * u * m1 * m2 + s1 * s2) / (2.0 * sig2)


def entropy(q: np.ndarray) -> np.ndarray:
    """-sum q log q per row with 0 log 0 = 0."""
    safe = np.where(q > 0, q, 1.0)
    return -np.sum(np.where(q > 0, q * np.log(safe), 0.0), axis=1)


def elbo(net: CausalNetwork, w: WeightSet, ev: Evidence, q: Mapping[str, np.ndarray], xi,
         per_location: bool = False, weighting: str = "posterior", terms=None):
    """Evidence lower bound summed over the locations in ``ev``.

    ``weighting="printed"`` scales the own-logit term by the numeric state,
    which breaks the lower-bound property and exists only for comparison.
    With ``per_location=True`` the per-location array is returned instead.
    """
    if len(ev) == 0:
        raise ValueError("empty batch")
    for k in net.latent:
        if np.isnan(q[k]).any():
            raise ValueError(f"posterior of {k!r} contains NaN")
    terms = node_terms(net, w, q, ev, xi) if terms is None else terms
    out = obs_term(net, w, q, ev) + xor_term(net, w, q, ev)
    for i in net.latent:
        out = out + terms[i].latent(q[i], weighting) + entropy(q[i])
    if per_location:
        return out
    return float(np.sum(out[np.argsort(ev.index, kind="stable")]))
