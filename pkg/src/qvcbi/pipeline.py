"""Scene-level inference: priors, pruning, fitting and reintegration."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .bounds import Evidence
from .graph import CausalNetwork, WeightSet
from .inference import FitConfig, FitResult, e_step_only, fit, initial_weights
from .priors import FragilityCurve, PagerStub, PriorField, attach_priors, build_prior_field
from .scene_io import PruneResult, Scene, prune_by_footprint


@dataclass
class SceneFit:
    """Fit over the BD-active cells plus full-candidate posteriors.

    ``posteriors[node]`` has one row per scene candidate; pruned cells carry
    BD = [1, 0, ..., 0] and LS/LF from the reduced network.
    """

    result: FitResult
    posteriors: dict
    prune: PruneResult
    priors: PriorField
    fit_time: float


def scene_priors(scene: Scene, net: CausalNetwork, curve: FragilityCurve | None = None, mode: str = "hazus",
                 gamma: float = 0.5, stub: PagerStub | None = None) -> PriorField:
    return build_prior_field(
        scene.pga_values(), scene.ground_failure("LS"), scene.ground_failure("LF"), net,
        curve=curve, mode=mode, gamma=gamma, stub=stub, index=np.arange(scene.candidates.size),
    )


def scene_evidence(scene: Scene, net: CausalNetwork, priors: PriorField, sel=None) -> Evidence:
    """Evidence over candidate positions ``sel`` (all candidates by default).

    Location ids are the flat cell ids, so orderings match across subsets.
    """
    sel = np.arange(scene.candidates.size) if sel is None else np.asarray(sel)
    offs = attach_priors(net, priors, index=sel)
    return Evidence(np.log(scene.y[sel]), scene.u[sel], offs, scene.candidates[sel])


def data_init(ev: Evidence, net: CausalNetwork, seed: int = 0, sigma_xor: float = 0.1) -> WeightSet:
    """Seeded small random weights with the observation intercept at the mean of log y."""
    return initial_weights(net, seed, sigma_xor=sigma_xor, obs_leak=float(np.mean(ev.log_y)))


def run_scene(scene: Scene, net: CausalNetwork, cfg: FitConfig, priors: PriorField | None = None,
              prune_mode: str = "strict", tau: float = 0.2, w_init: WeightSet | None = None,
              progress=None, checkpoint_path=None, resume: bool = False) -> SceneFit:
    """Prune, fit and reintegrate one scene.

    Weights are learned on the footprint cells (all cells when ``prune_mode``
    is none).  Cells admitted only by compensation get posteriors from an
    E-step at the learned weights, so footprint-free ground never shapes the
    weights it is judged by.
    """
    priors = priors if priors is not None else scene_priors(scene, net)
    bd_prior = priors.probs.get("BD")
    pr = prune_by_footprint(scene, prune_mode, bd_prior, tau)
    fit_mask = pr.active & scene.has_footprint() if prune_mode == "compensated" else pr.active
    fit_sel = np.flatnonzero(fit_mask)
    if fit_sel.size == 0:
        raise ValueError("no BD-active cells after pruning")
    ev = scene_evidence(scene, net, priors, fit_sel)
    if w_init is not None:
        w0 = w_init
    elif cfg.init == "regression":
        w0 = regression_init(ev, net, cfg.seed, cfg.sigma_xor)
    elif cfg.init == "quantile":
        w0 = quantile_init(ev, net, cfg.seed, cfg.sigma_xor)
    else:
        w0 = data_init(ev, net, cfg.seed, cfg.sigma_xor)
    t0 = time.perf_counter()
    res = fit(ev, net, w0, cfg, progress=progress, checkpoint_path=checkpoint_path, resume=resume)
    fit_time = time.perf_counter() - t0
    q_active = {k: np.zeros((scene.candidates.size, net.card[k])) for k in net.latent}
    for k in net.latent:
        q_active[k][fit_sel] = res.posterior.q[k]
    extra = np.flatnonzero(pr.active & ~fit_mask)
    if extra.size:
        post, _ = e_step_only(scene_evidence(scene, net, priors, extra), net, res.weights, cfg)
        for k in net.latent:
            q_active[k][extra] = post.q[k]
    q_active = {k: v[pr.active] for k, v in q_active.items()}
    post = complete_posteriors(scene, net, res.weights, cfg, priors, pr, q_active)
    return SceneFit(res, post, pr, priors, fit_time)


def complete_posteriors(scene: Scene, net: CausalNetwork, w: WeightSet, cfg: FitConfig, priors: PriorField,
                        pr: PruneResult, q_active: dict) -> dict:
    """Candidate-wide posteriors: active rows from ``q_active``, pruned rows from the BD-free network."""
    n = scene.candidates.size
    out = {}
    for node in net.latent:
        arr = np.zeros((n, net.card[node]))
        arr[pr.active] = q_active[node]
        out[node] = arr
    pruned = np.flatnonzero(pr.pruned)
    if pruned.size:
        red = net.without("BD")
        if red.latent:
            ev = scene_evidence(scene, red, priors, pruned)
            q, _ = e_step_only(ev, red, w, replace(cfg, workers=1) if cfg.workers < 1 else cfg)
            for node in red.latent:
                out[node][pruned] = q.q[node]
        if "BD" in out:
            out["BD"][pruned] = 0.0
            out["BD"][pruned, 0] = 1.0
    return out


def regression_init(ev: Evidence, net: CausalNetwork, seed: int = 0, sigma_xor: float = 0.1,
                    min_noise: float = 0.05) -> WeightSet:
    """Observation weights from a least-squares fit of log y on prior state probabilities.

    E[log y] = w0 + sum_k sum_m w_obs[k, m] m P(x_k = m) when the latent
    states are independent, so regressing log y on the prior probabilities
    gives a consistent starting point for the observation layer.  All other
    weights follow ``initial_weights``.
    """
    from .inference import prior_posterior

    w = initial_weights(net, seed, sigma_xor=sigma_xor)
    q = prior_posterior(net, ev)
    cols, keys = [np.ones(len(ev))], []
    for k in net.obs_parents:
        for m in range(1, net.card[k]):
            cols.append(q[k][:, m])
            keys.append((k, m))
    X = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(X, ev.log_y, rcond=None)
    resid = ev.log_y - X @ coef
    obs = {k: np.array(v) for k, v in w.obs.items()}
    for (k, m), c in zip(keys, coef[1:]):
        obs[k][m] = c / m
    return w.replace(obs=obs, obs_leak=float(coef[0]), obs_noise=max(float(np.std(resid)), min_noise))


def quantile_init(ev: Evidence, net: CausalNetwork, seed: int = 0, sigma_xor: float = 0.1,
                  min_noise: float = 0.05) -> WeightSet:
    """Observation weights with BD states placed at log-y quantiles.

    State m of BD gets the log-y quantile at the middle of its share of the
    average prior mass, so the states start ordered even when the priors
    carry no spatial information.  The remaining observation parents are then
    fitted by least squares to what BD leaves unexplained.
    """
    from .inference import prior_posterior

    if "BD" not in net.obs_parents:
        return regression_init(ev, net, seed, sigma_xor, min_noise)
    w = initial_weights(net, seed, sigma_xor=sigma_xor)
    q = prior_posterior(net, ev)
    pbar = q["BD"].mean(axis=0)
    cum = np.cumsum(pbar)
    qs = np.quantile(ev.log_y, np.clip(cum - pbar / 2, 0.0, 1.0))
    obs = {k: np.array(v) for k, v in w.obs.items()}
    obs["BD"][1:] = (qs[1:] - qs[0]) / np.arange(1, len(qs))
    resid = ev.log_y - qs[0] - q["BD"] @ (obs["BD"] * np.arange(net.card["BD"]))
    cols, keys = [], []
    for k in net.obs_parents:
        if k != "BD":
            for m in range(1, net.card[k]):
                cols.append(q[k][:, m])
                keys.append((k, m))
    if cols:
        coef, *_ = np.linalg.lstsq(np.column_stack(cols), resid, rcond=None)
        for (k, m), c in zip(keys, coef):
            obs[k][m] = c / m
    low = ev.log_y[ev.log_y <= np.quantile(ev.log_y, cum[0])]
    noise = max(float(np.std(low)) if low.size > 1 else 1.0, min_noise)
    return w.replace(obs=obs, obs_leak=float(qs[0]), obs_noise=noise)
