"""Stochastic variational EM.

E-step: coordinate ascent on each node's posterior row.  The bound is linear
in any single node's posterior, so the optimal row is a softmax of the partial
derivatives of the non-entropy part (the logits T below) and every update is
an exact maximisation.  M-step: preconditioned gradient ascent on the weights
followed by an L-1 proximal step.  xi is refreshed around each E-step.

All per-location work runs over fixed-size chunks of the location axis; chunk
boundaries do not depend on the worker count, so the per-location arrays and
their ordered reductions are identical for any number of workers.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .bounds import (
    Evidence, NodeTerms, dlambda_dxi, elbo, node_terms, obs_quadratic,
    obs_stats, parent_stats, state_moments,
)
from .graph import CausalNetwork, check_learn_groups, WeightLayout, WeightSet, conditional_categorical

log = logging.getLogger(__name__)

MIN_OBS_NOISE = 1e-3


class FitDivergence(RuntimeError):
    def __init__(self, msg, epoch=None, batch=None, location=None):
        super().__init__(msg)
        self.epoch, self.batch, self.location = epoch, batch, location


@dataclass
class PosteriorField:
    """Factorised posteriors q[node] of shape (L, M_i + 1) over the locations in ``index``."""

    q: dict
    index: np.ndarray

    def copy(self) -> "PosteriorField":
        return PosteriorField({k: v.copy() for k, v in self.q.items()}, self.index.copy())

    def take(self, sel) -> dict:
        return {k: v[sel] for k, v in self.q.items()}

    def argmax(self, node: str) -> np.ndarray:
        # np.argmax returns the first maximum, so ties go to the lowest state
        return np.argmax(self.q[node], axis=1)


@dataclass
class VariationalParams:
    """xi[node] of shape (L, M_i + 1), one row per location."""

    xi: dict

    def copy(self) -> "VariationalParams":
        return VariationalParams({k: v.copy() for k, v in self.xi.items()})


INIT_MODES = ("regression", "quantile", "random")


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 0.05
    batch_size: int = 1024
    max_epochs: int = 100
    e_step_sweeps: int = 2
    lambda1: float = 0.0
    lambda2: float = 0.0
    sigma_xor: float = 0.1
    seed: int = 0
    tol: float = 1e-5
    patience: int = 5
    xi_mode: str = "fixedpoint"
    xi_iters: int = 100
    xi_tol: float = 1e-8
    full_batch: bool = False
    preconditioner: str = "identity"
    rms_decay: float = 0.9
    rms_floor: float = 1e-8
    learn_weights: bool = True
    audit_size: int = 1024
    final_sweeps: int = 5
    workers: int = 1
    chunk_size: int = 4096
    checkpoint_every: int = 10
    warm_start: bool = True
    learn: tuple = ("parent", "obs", "obs_leak", "obs_noise")
    init: str = "quantile"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.e_step_sweeps < 0:
            raise ValueError("max_epochs and e_step_sweeps must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("L-1 strengths must be >= 0")
        if self.xi_mode not in ("fixedpoint", "gradient"):
            raise ValueError(f"xi_mode must be 'fixedpoint' or 'gradient', got {self.xi_mode!r}")
        if self.preconditioner not in ("identity", "rmsprop"):
            raise ValueError(f"preconditioner must be 'identity' or 'rmsprop', got {self.preconditioner!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.workers < 1 or self.chunk_size < 1:
            raise ValueError("workers and chunk_size must be >= 1")
        object.__setattr__(self, "learn", check_learn_groups(self.learn))
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {list(INIT_MODES)}, got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    weights: WeightSet
    posterior: PosteriorField
    xi: VariationalParams
    trace: list
    epochs: int
    converged: bool
    wall_time: float
    grad_norms: list = field(default_factory=list)


# --------------------------------------------------------------------------
# chunked execution


class _Runner:
    """Applies a per-chunk function over the location axis, in chunk order."""

    def __init__(self, workers: int = 1, chunk_size: int = 4096):
        self.workers = workers
        self.chunk_size = chunk_size
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def slices(self, n: int):
        return [slice(s, min(s + self.chunk_size, n)) for s in range(0, n, self.chunk_size)]

    def map(self, fn, n: int) -> list:
        sl = self.slices(n)
        if self._pool is None or len(sl) == 1:
            return [fn(s) for s in sl]
        return list(self._pool.map(fn, sl))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def _take_q(q, sl):
    return {k: v[sl] for k, v in q.items()}


# --------------------------------------------------------------------------
# E-step


def _ge(t: NodeTerms, q_self: np.ndarray) -> np.ndarray:
    """d latent_i / d E[z_m] (L, M + 1)."""
    return q_self - 0.5 - 2.0 * t.lam * (t.ez - t.abar[:, None])


def _dv(t: NodeTerms, j: int) -> np.ndarray:
    """d latent_i / d Var[x_k] for the j-th parent of i (L,)."""
    Wk = t.W[j]
    return -(t.lam @ (Wk * Wk)) + t.Lam * t.beta[j] ** 2


def e_step_logits(net: CausalNetwork, w: WeightSet, ev: Evidence, q, xi, node: str, terms=None) -> np.ndarray:
    """Unnormalised log-posterior T of ``node`` for every location, shape (L, M + 1)."""
    terms = node_terms(net, w, q, ev, xi) if terms is None else terms
    K = net.card[node]
    vals = np.arange(K, dtype=float)
    T = terms[node].ez.copy()
    if node in net.obs_parents:
        A, _ = obs_stats(net, w, q)
        rest = ev.log_y - w.obs_leak
        for k in net.obs_parents:
            if k != node:
                rest = rest - A[k]
        g = w.obs[node] * vals
        s2 = w.obs_noise**2
        T += (rest[:, None] * g - 0.5 * g * g) / s2
    if net.xor_parents and node in net.xor_parents:
        other = net.xor_parents[1] if net.xor_parents[0] == node else net.xor_parents[0]
        mo, so, _ = state_moments(q[other])
        T -= (-2.0 * ev.u[:, None] * vals * mo[:, None] + (vals * vals) * so[:, None]) / (2.0 * w.sigma_xor**2)
    mu_k = q[node] @ vals
    for child in net.children[node]:
        t = terms[child]
        j = t.parents.index(node)
        ge = _ge(t, q[child])
        T += vals * (ge @ t.W[j])[:, None] + (vals * vals - 2.0 * mu_k[:, None] * vals) * _dv(t, j)[:, None]
    return T


def e_step_sweep(net: CausalNetwork, w: WeightSet, ev: Evidence, q, xi, sweeps: int = 1,
                 order: Sequence[str] | None = None) -> dict:
    """Coordinate ascent over the latent nodes, returning new posteriors.

    Nodes are visited in ``net.latent`` order unless ``order`` is given.
    """
    q = {k: v.copy() for k, v in q.items()}
    order = net.latent if order is None else order
    for _ in range(sweeps):
        for node in order:
            T = e_step_logits(net, w, ev, q, xi, node)
            if not np.all(np.isfinite(T)):
                bad = int(ev.index[np.where(~np.isfinite(T).all(axis=1))[0][0]])
                raise FitDivergence(f"non-finite E-step logits at location {bad}", location=bad)
            q[node] = conditional_categorical(T)
    return q


def e_step_update(l: int, q: PosteriorField, w: WeightSet, xi: VariationalParams, ev: Evidence,
                  net: CausalNetwork, sweeps: int = 1) -> dict:
    """Updated posterior rows of location ``l`` (position within ``ev``)."""
    sl = slice(l, l + 1)
    out = e_step_sweep(net, w, ev.take(sl), q.take(sl), {k: v[sl] for k, v in xi.xi.items()}, sweeps)
    return {k: v[0] for k, v in out.items()}


# --------------------------------------------------------------------------
# xi


def grad_xi(net, w, ev: Evidence, q, xi, terms=None) -> dict:
    """d ELBO / d xi per location, node and state.

    Written as the quotient-rule expansion of E[alpha_hat^2] = f / g with
    g = 16 Lam^2; the sigmoid and linear terms cancel exactly.
    """
    terms = node_terms(net, w, q, ev, xi) if terms is None else terms
    out = {}
    for i in net.latent:
        t = terms[i]
        dl = dlambda_dxi(xi[i])
        lam_ezz_row = t.ez * (t.lam * t.ez).sum(axis=1)[:, None] + t.lam * (t.n * t.n)
        for Wk, v in zip(t.W, t.pv):
            lam_ezz_row = lam_ezz_row + Wk * ((t.lam @ Wk) * v)[:, None]
        g = 16.0 * t.Lam**2
        f = g * t.ea2
        fp = 32.0 * dl * lam_ezz_row + 8.0 * (t.M - 1) * dl * t.ez
        gp = 32.0 * dl * t.Lam[:, None]
        dea2 = (fp * g[:, None] - f[:, None] * gp) / (g * g)[:, None]
        out[i] = -dl * (t.ez2 - xi[i] ** 2) + dl * t.ea2[:, None] + t.Lam[:, None] * dea2
    return out


def xi_envelope_grad(t: NodeTerms) -> np.ndarray:
    """Same gradient via the envelope argument: -lambda'(xi) (E[(z - alpha_hat)^2] - xi^2)."""
    return -dlambda_dxi(t.xi) * (t.sq_dev() - t.xi**2)


def _xi_fixedpoint_node(net, w, node, q, ev, xi_node, pst, iters, tol):
    for _ in range(iters):
        t = NodeTerms(net, w, node, q, ev, xi_node, pst)
        new = np.sqrt(np.maximum(t.sq_dev(), 0.0))
        done = np.max(np.abs(new - xi_node)) < tol if new.size else True
        xi_node = new
        if done:
            break
    return xi_node


def _xi_gradient_node(net, w, node, q, ev, xi_node, pst, step=1.0, halvings=30):
    t = NodeTerms(net, w, node, q, ev, xi_node, pst)
    base = t.latent(q[node])
    g = xi_envelope_grad(t)
    accepted = np.zeros(len(ev), dtype=bool)
    out = xi_node.copy()
    for _ in range(halvings):
        trial = np.maximum(xi_node + step * g, 0.0)
        val = NodeTerms(net, w, node, q, ev, trial, pst).latent(q[node])
        ok = (val >= base) & ~accepted
        out[ok] = trial[ok]
        accepted |= ok
        if accepted.all():
            break
        step *= 0.5
    return out


def update_xi(net: CausalNetwork, w: WeightSet, ev: Evidence, q, xi, cfg: FitConfig | None = None) -> dict:
    """Refresh xi for every node; the bound never loosens."""
    cfg = cfg or FitConfig()
    pst = parent_stats(net, q)
    out = {}
    for i in net.latent:
        if cfg.xi_mode == "fixedpoint":
            out[i] = _xi_fixedpoint_node(net, w, i, q, ev, xi[i], pst, cfg.xi_iters, cfg.xi_tol)
        else:
            out[i] = _xi_gradient_node(net, w, i, q, ev, xi[i], pst)
    return out


def initial_xi(net, w, ev: Evidence, q, cfg: FitConfig | None = None) -> dict:
    cfg = cfg or FitConfig()
    xi0 = {i: np.ones((len(ev), net.card[i])) for i in net.latent}
    return update_xi(net, w, ev, q, xi0, replace(cfg, xi_mode="fixedpoint"))


# --------------------------------------------------------------------------
# weight gradients


def grad_per_location(net: CausalNetwork, w: WeightSet, ev: Evidence, q, xi, layout: WeightLayout) -> np.ndarray:
    """d ELBO_l / d w for every location l, shape (L, layout.size)."""
    L = len(ev)
    terms = node_terms(net, w, q, ev, xi)
    cols = {}
    for i in net.latent:
        t = terms[i]
        ge = _ge(t, q[i])
        cols[("leak", i)] = ge
        if i in net.prior_nodes:
            off = ev.offsets.get(i)
            cols[("prior", i)] = np.zeros(L) if off is None else np.einsum("lm,lm->l", ge, off)
        for j, k in enumerate(t.parents):
            Wk = t.W[j]
            cols[("parent", (k, i))] = ge * t.pmu[j][:, None] - 2.0 * t.lam * t.pv[j][:, None] * (Wk - t.beta[j][:, None])
        cols[("noise", i)] = -2.0 * t.lam * t.n * (1.0 - t.c)
    s = w.obs_noise
    Q, r, A, sa = obs_quadratic(net, w, q, ev)
    for k in net.obs_parents:
        vals = np.arange(net.card[k], dtype=float)
        g = w.obs[k] * vals
        rest = (r - (sa - A[k]))[:, None]
        cols[("obs", k)] = vals * q[k] * (rest - g) / (s * s)
    cols[("obs_leak", None)] = (r - sa) / (s * s)
    cols[("obs_noise", None)] = -1.0 / s + Q / s**3

    out = np.zeros((L, layout.size))
    for j, (grp, key, m) in enumerate(layout.entries):
        c = cols[(grp, key)]
        out[:, j] = c if m is None else c[:, m]
    out[:, ~layout.free] = 0.0
    return out


def _ordered_sum(per_loc: np.ndarray, index: np.ndarray) -> np.ndarray:
    order = np.argsort(index, kind="stable")
    return np.sum(per_loc[order], axis=0)


def grad_weights(net: CausalNetwork, w: WeightSet, ev: Evidence, q, xi, layout: WeightLayout | None = None) -> np.ndarray:
    """Gradient of the summed ELBO over the batch, as a flat vector in ``layout`` order.

    Per-location rows are reduced in ascending location-id order, so the
    result does not depend on the order of locations within the batch.
    """
    layout = layout or WeightLayout(net)
    return _ordered_sum(grad_per_location(net, w, ev, q, xi, layout), ev.index)


def m_step(w: WeightSet, grad: np.ndarray, cfg: FitConfig, precond_state: dict | None,
           layout: WeightLayout) -> tuple[WeightSet, dict]:
    """One preconditioned ascent step plus the L-1 proximal shrinkage.

    ``grad`` is the per-location mean gradient.  Returns the new weights and
    the updated preconditioner state.
    """
    if not cfg.learning_rate > 0:
        raise ValueError("learning_rate must be > 0")
    state = dict(precond_state or {})
    g = np.where(layout.free, grad, 0.0)
    if cfg.preconditioner == "rmsprop":
        v = state.get("v")
        v = (1.0 - cfg.rms_decay) * g * g if v is None else cfg.rms_decay * np.asarray(v) + (1.0 - cfg.rms_decay) * g * g
        state["v"] = v
        A = 1.0 / (np.sqrt(v) + cfg.rms_floor)
    else:
        A = np.ones(layout.size)
    step = cfg.learning_rate * A
    vec = layout.pack(w) + step * g
    for mask, lam in ((layout.l1_obs, cfg.lambda1), (layout.l1_prior, cfg.lambda2)):
        if lam > 0:
            thr = step[mask] * lam
            vec[mask] = np.sign(vec[mask]) * np.maximum(np.abs(vec[mask]) - thr, 0.0)
    j = layout.noise_index
    if abs(vec[j]) < MIN_OBS_NOISE:
        vec[j] = math.copysign(MIN_OBS_NOISE, vec[j] if vec[j] != 0 else 1.0)
    return layout.unpack(vec, w), state


# --------------------------------------------------------------------------
# initialisation


def initial_weights(net: CausalNetwork, seed: int = 0, scale: float = 0.01, obs_noise: float = 1.0,
                    sigma_xor: float = 0.1, obs_leak: float | None = None) -> WeightSet:
    """Free weights ~ N(0, scale^2) from a seeded stream; prior attachment weights 1."""
    layout = WeightLayout(net)
    w = WeightSet.zeros(net, obs_noise=obs_noise, sigma_xor=sigma_xor)
    rng = np.random.default_rng([seed, 0x1E17])
    vec = layout.pack(w)
    draw = rng.normal(0.0, scale, layout.size)
    free = layout.free.copy()
    free[layout.noise_index] = False
    for j, (g, _, _) in enumerate(layout.entries):
        if g == "prior":
            free[j] = False
    vec[free] = draw[free]
    if obs_leak is not None:
        vec[layout.entries.index(("obs_leak", None, None))] = obs_leak
    return layout.unpack(vec, w)


def prior_posterior(net: CausalNetwork, ev: Evidence) -> dict:
    """q initialised to the per-location prior categorical, uniform where absent."""
    L = len(ev)
    q = {}
    for i in net.latent:
        off = ev.offsets.get(i)
        q[i] = conditional_categorical(off) if off is not None else np.full((L, net.card[i]), 1.0 / net.card[i])
    return q


# --------------------------------------------------------------------------
# fit


def _checkpoint_payload(epoch, w, post, xi, trace, norms, precond, stall, converged) -> dict:
    return {
        "epoch": epoch,
        "weights": w.to_dict(),
        "q": {k: v.tolist() for k, v in post.q.items()},
        "index": post.index.tolist(),
        "xi": {k: v.tolist() for k, v in xi.xi.items()},
        "trace": trace,
        "grad_norms": norms,
        "precond": {k: np.asarray(v).tolist() for k, v in precond.items()},
        "stall": stall,
        "converged": converged,
    }


def save_checkpoint(path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())


def fit(ev: Evidence, net: CausalNetwork, w_init: WeightSet, cfg: FitConfig,
        q_init: Mapping | None = None, progress: Callable | None = None,
        checkpoint_path=None, resume: bool = False) -> FitResult:
    """Run stochastic variational EM over the locations in ``ev``.

    Each epoch shuffles the locations with a stream keyed on (seed, epoch),
    then per batch: xi refresh, ``e_step_sweeps`` coordinate sweeps, xi
    refresh, M-step.  The audit ELBO (mean per location over a fixed subset)
    is recorded once per epoch.  After the last epoch a final E-step over all
    locations makes the returned posteriors consistent with the final weights.
    """
    t0 = time.perf_counter()
    if len(ev) == 0:
        raise ValueError("active set is empty")
    L = len(ev)
    if not cfg.full_batch and cfg.batch_size > L:
        cfg = replace(cfg, batch_size=L)
    w = w_init if w_init.sigma_xor == cfg.sigma_xor else w_init.replace(sigma_xor=cfg.sigma_xor)
    layout = WeightLayout(net, learn=cfg.learn)
    runner = _Runner(cfg.workers, cfg.chunk_size)
    q0 = prior_posterior(net, ev) if q_init is None else {k: np.array(v, dtype=float) for k, v in q_init.items()}
    post = PosteriorField(q0, ev.index.copy())
    if cfg.max_epochs == 0:
        xi = VariationalParams(_chunked_xi_init(runner, net, w, ev, post.q, cfg))
        runner.close()
        return FitResult(w, post, xi, [], 0, False, time.perf_counter() - t0)

    audit_rng = np.random.default_rng([cfg.seed, 0xA0D1])
    audit = np.sort(audit_rng.permutation(L)[: min(cfg.audit_size, L)])
    trace, norms, precond, stall, start = [], [], {}, 0, 0
    converged = False
    xi = None
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        ck = load_checkpoint(checkpoint_path)
        w = WeightSet.from_dict(ck["weights"])
        post = PosteriorField({k: np.array(v) for k, v in ck["q"].items()}, np.array(ck["index"], dtype=np.int64))
        xi = VariationalParams({k: np.array(v) for k, v in ck["xi"].items()})
        trace, norms, stall, converged = ck["trace"], ck["grad_norms"], ck["stall"], ck["converged"]
        precond = {k: np.array(v) for k, v in ck["precond"].items()}
        start = ck["epoch"]
    if xi is None:
        xi = VariationalParams(_chunked_xi_init(runner, net, w, ev, post.q, cfg))
        if q_init is None and cfg.warm_start:
            _warm_start(runner, net, w, ev, post, xi, cfg)

    epoch = start
    try:
        while epoch < cfg.max_epochs and not converged:
            if cfg.full_batch:
                batches = [np.arange(L)]
            else:
                perm = np.random.default_rng([cfg.seed, epoch]).permutation(L)
                batches = [np.sort(perm[s:s + cfg.batch_size]) for s in range(0, L, cfg.batch_size)]
            gnorm = 0.0
            for b, sel in enumerate(batches):
                try:
                    g = _batch_step(runner, net, w, ev, post, xi, sel, cfg, layout, cfg.learn_weights)
                except FitDivergence as exc:
                    raise FitDivergence(f"{exc} (epoch {epoch}, batch {b})", epoch, b, exc.location) from None
                except OverflowError:
                    raise FitDivergence(f"weights overflowed (epoch {epoch}, batch {b})", epoch, b) from None
                if cfg.learn_weights:
                    if not np.all(np.isfinite(g)):
                        raise FitDivergence(f"non-finite gradient (epoch {epoch}, batch {b})", epoch, b)
                    gnorm = float(np.linalg.norm(g))
                    w, precond = m_step(w, g, cfg, precond, layout)
                    if not np.all(np.isfinite(layout.pack(w))):
                        raise FitDivergence(f"non-finite weights (epoch {epoch}, batch {b})", epoch, b)
            val = _audit_elbo(runner, net, w, ev, post, xi, audit)
            if not math.isfinite(val):
                raise FitDivergence(f"audit ELBO is not finite (epoch {epoch})", epoch, len(batches) - 1)
            if trace:
                rel = abs(val - trace[-1]) / max(abs(trace[-1]), 1e-12)
                stall = stall + 1 if rel < cfg.tol else 0
            trace.append(val)
            norms.append(gnorm)
            epoch += 1
            converged = stall >= cfg.patience
            if progress is not None:
                progress({"epoch": epoch, "audit_elbo": val, "grad_norm": gnorm, "converged": converged})
            if checkpoint_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, _checkpoint_payload(epoch, w, post, xi, trace, norms, precond, stall, converged))

        if cfg.final_sweeps:
            _final_pass(runner, net, w, ev, post, xi, cfg)
    finally:
        runner.close()
    return FitResult(w, post, xi, trace, epoch, converged, time.perf_counter() - t0, norms)


def _chunked_xi_init(runner, net, w, ev, q, cfg):
    parts = runner.map(lambda sl: initial_xi(net, w, ev.take(sl), _take_q(q, sl), cfg), len(ev))
    return {i: np.concatenate([p[i] for p in parts]) for i in net.latent}


def _warm_start(runner, net, w, ev, post, xi, cfg):
    """One coordinate pass in reverse sweep order from the prior posterior.

    Children see the observation before their parents do, so the parents
    are not first fitted against a child still sitting at its prior.
    """
    idx = np.arange(len(ev))
    order = tuple(reversed(net.latent))

    def work(sl):
        sub = idx[sl]
        e = ev.take(sl)
        x = {k: v[sub] for k, v in xi.xi.items()}
        q = e_step_sweep(net, w, e, post.take(sub), x, 1, order=order)
        return sub, q, update_xi(net, w, e, q, x, cfg)

    for sub, q, x in runner.map(work, len(ev)):
        for k in q:
            post.q[k][sub] = q[k]
            xi.xi[k][sub] = x[k]


def _batch_step(runner, net, w, ev, post, xi, sel, cfg, layout, want_grad):
    bev = ev.take(sel)

    def work(sl):
        sub = sel[sl]
        e = bev.take(sl)
        q = post.take(sub)
        x = {k: v[sub] for k, v in xi.xi.items()}
        x = update_xi(net, w, e, q, x, cfg)
        q = e_step_sweep(net, w, e, q, x, cfg.e_step_sweeps)
        x = update_xi(net, w, e, q, x, cfg)
        g = grad_per_location(net, w, e, q, x, layout) if want_grad else None
        return sub, q, x, g

    parts = runner.map(work, len(sel))
    for sub, q, x, _ in parts:
        for k in q:
            post.q[k][sub] = q[k]
            xi.xi[k][sub] = x[k]
    if not want_grad:
        return None
    per_loc = np.concatenate([p[3] for p in parts])
    return _ordered_sum(per_loc, bev.index) / len(sel)


def _audit_elbo(runner, net, w, ev, post, xi, audit) -> float:
    aev = ev.take(audit)

    def work(sl):
        sub = audit[sl]
        return elbo(net, w, aev.take(sl), post.take(sub), {k: v[sub] for k, v in xi.xi.items()}, per_location=True)

    per = np.concatenate(runner.map(work, len(audit)))
    return float(np.sum(per[np.argsort(aev.index, kind="stable")]) / len(audit))


def _final_pass(runner, net, w, ev, post, xi, cfg):
    idx = np.arange(len(ev))

    def work(sl):
        sub = idx[sl]
        e = ev.take(sl)
        q = post.take(sub)
        x = {k: v[sub] for k, v in xi.xi.items()}
        for _ in range(cfg.final_sweeps):
            x = update_xi(net, w, e, q, x, cfg)
            q = e_step_sweep(net, w, e, q, x, 1)
        x = update_xi(net, w, e, q, x, cfg)
        return sub, q, x

    for sub, q, x in runner.map(work, len(ev)):
        for k in q:
            post.q[k][sub] = q[k]
            xi.xi[k][sub] = x[k]


def e_step_only(ev: Evidence, net: CausalNetwork, w: WeightSet, cfg: FitConfig | None = None,
                q_init=None, sweeps: int | None = None) -> tuple[PosteriorField, VariationalParams]:
    """Posteriors at fixed weights (no M-step), used for pruned cells and equivalence checks."""
    cfg = cfg or FitConfig()
    runner = _Runner(cfg.workers, cfg.chunk_size)
    q0 = prior_posterior(net, ev) if q_init is None else {k: np.array(v, dtype=float) for k, v in q_init.items()}
    post = PosteriorField(q0, ev.index.copy())
    try:
        xi = VariationalParams(_chunked_xi_init(runner, net, w, ev, post.q, cfg))
        if q_init is None and cfg.warm_start:
            _warm_start(runner, net, w, ev, post, xi, cfg)
        _final_pass(runner, net, w, ev, post, xi, replace(cfg, final_sweeps=sweeps or cfg.final_sweeps))
    finally:
        runner.close()
    return post, xi
