"""Forward sampling of synthetic scenes with known weights and latent states.

Every random quantity comes from its own stream ``default_rng([seed, purpose])``
so adding a draw for one purpose never shifts another.  The latent truth is
returned separately from the observable Scene.
"""
from __future__ import annotations

from typing import Mapping
from dataclasses import dataclass, replace

import numpy as np

from .graph import CausalNetwork, NetworkSpec, WeightSet, build_network, conditional_categorical
from .priors import FragilityCurve, binary_prior, default_curve, hazus_state_probs, prior_offsets
from .scene_io import Grid, Scene, assemble_scene

# stream purposes
_S_PGA, _S_SITE, _S_BUILD, _S_MISSING, _S_CORRUPT, _S_EPS, _S_BD, _S_Y, _S_GF = range(9)
_S_XOR = 100
XOR_MAX_TRIES = 100


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class PGAField:
    """Shaking field: constant, linear ramp (west to east) or radial decay from an epicentre."""

    kind: str = "radial"
    peak: float = 0.9
    floor: float = 0.03
    r0: float = 0.35
    center: tuple = (0.5, 0.5)
    site_sigma: float = 0.25
    site_scale: float = 4.0

    def sample(self, nrows: int, ncols: int, rng) -> np.ndarray:
        yy, xx = np.meshgrid((np.arange(nrows) + 0.5) / nrows, (np.arange(ncols) + 0.5) / ncols, indexing="ij")
        if self.kind == "constant":
            base = np.full((nrows, ncols), self.peak)
        elif self.kind == "ramp":
            base = self.floor + (self.peak - self.floor) * xx
        elif self.kind == "radial":
            r = np.hypot(xx - self.center[1], yy - self.center[0])
            base = self.floor + (self.peak - self.floor) * np.exp(-r / self.r0)
        else:
            raise ValueError(f"unknown PGA field kind {self.kind!r}")
        if self.site_sigma > 0:
            base = base * np.exp(self.site_sigma * _smooth_noise(nrows, ncols, self.site_scale, rng))
        return base


def _smooth_noise(nrows, ncols, scale, rng) -> np.ndarray:
    """Unit-variance smooth random field (Gaussian-blurred white noise)."""
    from scipy.ndimage import gaussian_filter

    z = gaussian_filter(rng.standard_normal((nrows, ncols)), scale, mode="wrap")
    return (z - z.mean()) / (z.std() + 1e-12)


@dataclass(frozen=True)
class GroundFailureField:
    """Probability grid built from Gaussian bumps (hillslopes) or a band along the western edge (coast)."""

    kind: str = "bumps"
    base: float = 0.02
    peak: float = 0.6
    n_bumps: int = 3
    width: float = 0.12
    band: float = 0.25
    offset: float = 0.0
    xrange: tuple = (0.1, 0.9)

    def sample(self, nrows: int, ncols: int, rng) -> np.ndarray:
        yy, xx = np.meshgrid((np.arange(nrows) + 0.5) / nrows, (np.arange(ncols) + 0.5) / ncols, indexing="ij")
        if self.kind == "bumps":
            shape = np.zeros((nrows, ncols))
            cys = rng.uniform(0.1, 0.9, size=self.n_bumps)
            cxs = rng.uniform(self.xrange[0], self.xrange[1], size=self.n_bumps)
            for cy, cx in zip(cys, cxs):
                shape = np.maximum(shape, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * self.width**2)))
        elif self.kind == "coast":
            shape = np.exp(-np.maximum(xx - self.offset, 0.0) / self.band)
        elif self.kind == "constant":
            shape = np.ones((nrows, ncols))
        else:
            raise ValueError(f"unknown ground-failure field kind {self.kind!r}")
        return np.clip(self.base + (self.peak - self.base) * shape, 0.0, 1.0)


DEFAULT_GAINS = {"BD": 1.0, "LS": 2.0, "LF": 1.5}


def true_weights(net: CausalNetwork, obs_leak: float = -4.5, obs_noise: float = 0.2, hazard_noise: float = 0.3,
                 sigma_xor: float = 0.1, gains: Mapping[str, float] | None = None) -> WeightSet:
    """Reference generating weights for the acceptance scenes."""
    M = net.M("BD") if "BD" in net.latent else 0
    parent, obs = {}, {}
    for (k, i) in [(k, i) for i in net.latent for k in net.parents[i]]:
        if (k, i) == ("LS", "BD"):
            parent[(k, i)] = np.r_[0.0, np.linspace(0.5, 1.5, M)] if M > 1 else np.array([0.0, 1.0])
        elif (k, i) == ("LF", "BD"):
            parent[(k, i)] = np.r_[0.0, np.linspace(0.8, 0.3, M)] if M > 1 else np.array([0.0, 0.8])
        else:
            parent[(k, i)] = np.zeros(net.card[i])
    gains = {**DEFAULT_GAINS, **(gains or {})}
    for k in net.obs_parents:
        obs[k] = np.r_[0.0, np.full(net.M(k), gains[k])]
    noise = {i: np.r_[0.0, np.full(net.M(i), hazard_noise)] for i in net.latent}
    return WeightSet(
        parent=parent, noise=noise, leak={i: np.zeros(net.card[i]) for i in net.latent},
        prior={i: 1.0 for i in net.prior_nodes}, obs=obs, obs_leak=obs_leak, obs_noise=obs_noise,
        sigma_xor=sigma_xor,
    )


@dataclass(frozen=True)
class SynthConfig:
    nrows: int = 64
    ncols: int = 64
    m_bd: int = 3
    xor: bool = True
    weights: WeightSet | None = None
    curve: FragilityCurve | None = None
    pga: PGAField = PGAField()
    ls_field: GroundFailureField = GroundFailureField("bumps", 0.02, 0.5, 3, 0.12)
    lf_field: GroundFailureField = GroundFailureField("coast", 0.02, 0.5, band=0.2)
    coverage: float = 1.0
    footprint_missing: float = 0.0
    missing_bias: float = 3.0
    prior_corruption: float = 0.0
    prior_shrink: float = 0.0
    seed: int = 0
    xll: float = -73.0
    yll: float = 18.0
    cellsize: float = 0.0005
    name: str = "custom"

    def __post_init__(self):
        if self.nrows < 1 or self.ncols < 1:
            raise ValueError("grid dimensions must be >= 1")
        for f in ("coverage", "footprint_missing", "prior_corruption", "prior_shrink"):
            v = getattr(self, f)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f} must lie in [0, 1], got {v}")

    def network(self) -> CausalNetwork:
        return build_network(NetworkSpec.paper_topology(m_bd=self.m_bd, xor=self.xor))

    def true_weights(self) -> WeightSet:
        return self.weights if self.weights is not None else true_weights(self.network())


@dataclass(frozen=True)
class LatentTruth:
    """Sampled hidden quantities per cell (flat, row-major); never part of a Scene."""

    bd: np.ndarray
    ls: np.ndarray
    lf: np.ndarray
    eps: dict
    eps_y: np.ndarray
    mu: np.ndarray
    building: np.ndarray
    pga_true: np.ndarray
    xor_forced: int = 0

    def states(self, node: str) -> np.ndarray:
        return {"BD": self.bd, "LS": self.ls, "LF": self.lf}[node]


def _rng(seed, *purpose):
    return np.random.default_rng([seed, *purpose])


def _sample_cat(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draw per row from uniforms ``u``."""
    cdf = np.cumsum(p, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] > cdf).sum(axis=1)


def _node_logits(w: WeightSet, node: str, states: dict, eps: np.ndarray, offset) -> np.ndarray:
    z = np.broadcast_to(w.leak[node], eps.shape).copy()
    for (k, i), coef in w.parent.items():
        if i == node:
            z += states[k][:, None] * coef
    z += w.noise[node] * eps
    if offset is not None:
        z += w.prior.get(node, 1.0) * offset
    z[:, 0] = 0.0
    return z


def sample_scene(cfg: SynthConfig) -> tuple[Scene, LatentTruth]:
    """Draw one synthetic scene and its hidden truth."""
    net = cfg.network()
    w = cfg.true_weights()
    curve = cfg.curve or default_curve()
    if curve.M != cfg.m_bd:
        raise ValueError(f"fragility curve has {curve.M} states but m_bd = {cfg.m_bd}")
    nr, nc, s = cfg.nrows, cfg.ncols, cfg.seed
    N = nr * nc

    pga = cfg.pga.sample(nr, nc, _rng(s, _S_PGA)).reshape(-1)
    p_ls = cfg.ls_field.sample(nr, nc, _rng(s, _S_GF, 0)).reshape(-1)
    p_lf = cfg.lf_field.sample(nr, nc, _rng(s, _S_GF, 1)).reshape(-1)

    n_build = int(round(cfg.coverage * N))
    building = np.zeros(N, dtype=bool)
    building[_rng(s, _S_BUILD).permutation(N)[:n_build]] = True

    offsets = {"BD": prior_offsets(hazus_state_probs(pga, curve))}
    if "LS" in net.latent:
        offsets["LS"] = prior_offsets(binary_prior(p_ls, net.M("LS")))
    if "LF" in net.latent:
        offsets["LF"] = prior_offsets(binary_prior(p_lf, net.M("LF")))

    eps_rng = _rng(s, _S_EPS)
    eps = {i: np.column_stack([np.zeros(N), eps_rng.standard_normal((N, net.M(i)))]) for i in net.latent}
    eps_y = eps_rng.standard_normal(N)

    # LS and LF have no latent parents; resample jointly active cells
    states = {}
    forced = 0
    if "LS" in net.latent and "LF" in net.latent:
        pls = conditional_categorical(_node_logits(w, "LS", {}, eps["LS"], offsets["LS"]))
        plf = conditional_categorical(_node_logits(w, "LF", {}, eps["LF"], offsets["LF"]))
        ls = np.zeros(N, dtype=np.int64)
        lf = np.zeros(N, dtype=np.int64)
        todo = np.arange(N)
        for t in range(XOR_MAX_TRIES):
            r = _rng(s, _S_XOR, t)
            u = r.random((N, 2))
            a = _sample_cat(pls[todo], u[todo, 0])
            b = _sample_cat(plf[todo], u[todo, 1])
            ls[todo], lf[todo] = a, b
            if not cfg.xor:
                todo = todo[:0]
                break
            todo = todo[(a > 0) & (b > 0)]
            if todo.size == 0:
                break
        if todo.size:
            forced = int(todo.size)
            lf[todo] = 0
        states["LS"], states["LF"] = ls, lf
    else:
        for i in ("LS", "LF"):
            if i in net.latent:
                p = conditional_categorical(_node_logits(w, i, {}, eps[i], offsets[i]))
                states[i] = _sample_cat(p, _rng(s, _S_XOR, 0, i == "LF").random(N))

    pbd = conditional_categorical(_node_logits(w, "BD", states, eps["BD"], offsets["BD"]))
    bd = _sample_cat(pbd, _rng(s, _S_BD).random(N))
    bd[~building] = 0
    states["BD"] = bd

    mu = np.full(N, w.obs_leak)
    for k in net.obs_parents:
        mu += w.obs[k][states[k]] * states[k]
    log_y = mu + w.obs_noise * eps_y
    y = np.minimum(np.exp(log_y), 1.0)

    footprint = building.copy()
    if cfg.footprint_missing > 0 and n_build:
        idx = np.flatnonzero(building)
        k = int(round(cfg.footprint_missing * idx.size))
        wts = pga[idx] ** cfg.missing_bias
        # weighted sampling without replacement via exponential keys
        keys = _rng(s, _S_MISSING).exponential(size=idx.size) / wts
        footprint[idx[np.argsort(keys, kind="stable")[:k]]] = False

    pga_emit = pga.copy()
    if cfg.prior_corruption > 0:
        r = _rng(s, _S_CORRUPT)
        k = int(round(cfg.prior_corruption * N))
        sel = np.sort(r.permutation(N)[:k])
        pga_emit[sel] = pga_emit[sel][r.permutation(k)]
    if cfg.prior_shrink > 0:
        # pull log PGA toward the scene median: a vaguer, less confident shaking estimate
        lp = np.log(pga_emit)
        med = np.median(lp)
        pga_emit = np.exp(med + (1.0 - cfg.prior_shrink) * (lp - med))

    def grid(v):
        return Grid(nc, nr, cfg.xll, cfg.yll, cfg.cellsize, -9999.0, np.asarray(v, dtype=float).reshape(nr, nc))

    scene = assemble_scene(grid(y), grid(pga_emit), grid(p_ls), grid(p_lf), grid(footprint.astype(float)))
    truth = LatentTruth(
        bd=bd, ls=states.get("LS", np.zeros(N, dtype=np.int64)), lf=states.get("LF", np.zeros(N, dtype=np.int64)),
        eps=eps, eps_y=eps_y, mu=mu, building=building, pga_true=pga, xor_forced=forced,
    )
    return scene, truth


PRESETS = ("clean", "overlapping-hazards", "weak-prior", "missing-footprint")


def scenario_presets(name: str, seed: int = 0, nrows: int = 64, ncols: int = 64) -> SynthConfig:
    """Documented scene configurations used by the acceptance suite.

    clean               strong fragility prior, sparse ground failure, full coverage
    overlapping-hazards landslide bumps in the eastern uplands and a liquefaction
                        band along the western coast, both reaching into the
                        strongest shaking
    weak-prior          the emitted PGA grid is mostly shuffled and pulled toward
                        its median, so the BD prior built from it is vague and
                        barely discriminates (AUC 0.5 to 0.6)
    missing-footprint   60% building coverage; 30% of building cells lose their
                        footprint, preferentially where shaking is strong
    """
    base = SynthConfig(nrows=nrows, ncols=ncols, seed=seed, name=name)
    if name == "clean":
        return replace(
            base,
            ls_field=GroundFailureField("bumps", 0.01, 0.3, 2, 0.08),
            lf_field=GroundFailureField("coast", 0.01, 0.3, band=0.1),
        )
    if name == "overlapping-hazards":
        return replace(
            base,
            ls_field=GroundFailureField("bumps", 0.02, 0.7, 4, 0.12, xrange=(0.55, 0.9)),
            lf_field=GroundFailureField("coast", 0.02, 0.7, band=0.15),
        )
    if name == "weak-prior":
        return replace(
            base,
            ls_field=GroundFailureField("bumps", 0.01, 0.3, 2, 0.08),
            lf_field=GroundFailureField("coast", 0.01, 0.3, band=0.1),
            prior_corruption=0.8,
            prior_shrink=0.7,
        )
    if name == "missing-footprint":
        return replace(
            base,
            ls_field=GroundFailureField("bumps", 0.01, 0.3, 2, 0.08),
            lf_field=GroundFailureField("coast", 0.01, 0.3, band=0.1),
            coverage=0.6,
            footprint_missing=0.3,
        )
    raise ValueError(f"unknown preset {name!r}; available presets: {', '.join(PRESETS)}")
