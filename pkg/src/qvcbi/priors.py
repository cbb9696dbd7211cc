"""Per-location prior categoricals and their attachment to the network.

BD priors come from lognormal fragility curves evaluated at the local PGA
(optionally blended with a weak logistic family); LS/LF priors are the
ground-failure probability grids read as binary categoricals.  Priors enter
the network as per-location log-odds offsets on the activation logits.
"""
from __future__ import annotations

import importlib.resources
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
from scipy.special import expit, ndtr

from .graph import CausalNetwork

PRIOR_CLIP = 1e-6


@dataclass(frozen=True)
class FragilityCurve:
    """Lognormal exceedance curves, one (median, dispersion) per damage state 1..M."""

    medians: tuple
    dispersions: tuple
    name: str = "custom"

    def __post_init__(self):
        med = tuple(float(x) for x in self.medians)
        disp = tuple(float(x) for x in self.dispersions)
        if len(med) != len(disp) or not med:
            raise ValueError("medians and dispersions must be non-empty and of equal length")
        if any(m <= 0 for m in med) or any(b <= 0 for b in disp):
            raise ValueError("fragility medians and dispersions must be positive")
        if any(b <= a for a, b in zip(med, med[1:])):
            raise ValueError("fragility medians must be strictly increasing")
        object.__setattr__(self, "medians", med)
        object.__setattr__(self, "dispersions", disp)

    @property
    def M(self) -> int:
        return len(self.medians)

    @classmethod
    def from_toml(cls, path=None) -> "FragilityCurve":
        d = _load_curve_doc(path)
        return cls(tuple(d["medians"]), tuple(d["dispersions"]), d.get("name", "custom"))


@dataclass(frozen=True)
class PagerStub:
    """Logistic exceedance family E_d = expit(a_d + slope * ln(pga)).

    A zero slope makes the curve independent of PGA.
    """

    intercepts: tuple
    slope: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "intercepts", tuple(float(x) for x in self.intercepts))

    @classmethod
    def flat(cls, M: int) -> "PagerStub":
        # exceedance (M + 1 - d) / (M + 1) gives equal state masses
        e = [(M + 1 - d) / (M + 1) for d in range(1, M + 1)]
        return cls(tuple(math.log(p / (1 - p)) for p in e), 0.0)

    @classmethod
    def from_toml(cls, path=None) -> "PagerStub":
        d = _load_curve_doc(path).get("pager")
        if d is None:
            raise ValueError("fragility document has no [pager] table")
        return cls(tuple(d["intercepts"]), float(d.get("slope", 0.25)))


def _load_curve_doc(path) -> dict:
    if path is None:
        raw = importlib.resources.files("qvcbi").joinpath("data/hazus_default.toml").read_bytes()
    else:
        raw = Path(path).read_bytes()
    return tomli.loads(raw.decode())


def default_curve() -> FragilityCurve:
    return FragilityCurve.from_toml(None)


def _difference(exceed: np.ndarray) -> np.ndarray:
    """State masses from exceedance probabilities E_1..E_M along the last axis."""
    shape = exceed.shape[:-1]
    upper = np.concatenate([np.ones(shape + (1,)), exceed], axis=-1)
    lower = np.concatenate([exceed, np.zeros(shape + (1,))], axis=-1)
    p = upper - lower
    if np.any(p < 0):
        warnings.warn("fragility exceedances cross; negative masses clipped and renormalized", RuntimeWarning)
        p = np.maximum(p, 0.0)
        p = p / p.sum(axis=-1, keepdims=True)
    return p


def hazus_state_probs(pga, curve: FragilityCurve) -> np.ndarray:
    """Damage-state probabilities [1 - E_1, E_1 - E_2, ..., E_M] at ``pga`` (g).

    Vectorised: an array of PGA values gives an array with a trailing state axis.
    """
    pga = np.asarray(pga, dtype=float)
    if np.any(pga < 0) or np.any(np.isnan(pga)):
        raise ValueError("pga must be >= 0")
    med = np.asarray(curve.medians)
    beta = np.asarray(curve.dispersions)
    with np.errstate(divide="ignore"):
        lp = np.log(pga)[..., None]
    exceed = np.where(np.isneginf(lp), 0.0, ndtr((lp - np.log(med)) / beta))
    return _difference(exceed)


def pager_stub_probs(pga, stub: PagerStub) -> np.ndarray:
    pga = np.asarray(pga, dtype=float)
    if np.any(pga < 0):
        raise ValueError("pga must be >= 0")
    a = np.asarray(stub.intercepts)
    if stub.slope == 0.0:
        exceed = np.broadcast_to(expit(a), pga.shape + a.shape)
    else:
        with np.errstate(divide="ignore"):
            lp = np.log(pga)[..., None]
        exceed = np.where(np.isneginf(lp), 0.0, expit(a + stub.slope * lp))
    return _difference(np.array(exceed))


def combine_priors(p_hazus, p_pager, mode: str = "hazus", gamma: float = 0.5) -> np.ndarray:
    p_hazus = np.asarray(p_hazus, dtype=float)
    p_pager = np.asarray(p_pager, dtype=float)
    if p_hazus.shape != p_pager.shape:
        raise ValueError(f"length mismatch: {p_hazus.shape} vs {p_pager.shape}")
    if mode == "hazus":
        return p_hazus
    if mode == "pager":
        return p_pager
    if mode == "combined":
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if gamma == 1.0:
            return p_hazus
        p = gamma * p_hazus + (1.0 - gamma) * p_pager
        return p / p.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown prior mode {mode!r}; expected hazus, pager or combined")


@dataclass
class PriorField:
    """Prior categoricals per node, shape (L, M_i + 1), over the locations in ``index``."""

    probs: dict
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        L = None
        for k, p in self.probs.items():
            p = np.asarray(p, dtype=float)
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"prior of {k!r} is not normalized")
            self.probs[k] = p
            L = p.shape[0]
        if self.index is None:
            self.index = np.arange(L or 0)

    def take(self, sel) -> "PriorField":
        return PriorField({k: v[sel] for k, v in self.probs.items()}, self.index[sel])


def binary_prior(p, M: int = 1) -> np.ndarray:
    """[1 - p, p] rows; for M > 1 the active mass is split evenly over states 1..M."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("ground-failure probabilities must lie in [0, 1]")
    return np.column_stack([1.0 - p] + [p / M] * M)


def build_prior_field(pga, prior_ls, prior_lf, net: CausalNetwork, curve: FragilityCurve | None = None,
                      mode: str = "hazus", gamma: float = 0.5, stub: PagerStub | None = None,
                      index=None) -> PriorField:
    """Prior field for every location from flat PGA and ground-failure arrays."""
    probs = {}
    if "BD" in net.prior_nodes:
        curve = curve or default_curve()
        if curve.M != net.M("BD"):
            raise ValueError(f"fragility curve has {curve.M} states but M_BD = {net.M('BD')}")
        ph = hazus_state_probs(pga, curve)
        if mode == "hazus":
            probs["BD"] = ph
        else:
            stub = stub or PagerStub.from_toml(None)
            probs["BD"] = combine_priors(ph, pager_stub_probs(pga, stub), mode, gamma)
    for node, grid in (("LS", prior_ls), ("LF", prior_lf)):
        if node in net.prior_nodes and grid is not None:
            probs[node] = binary_prior(grid, net.M(node))
    return PriorField(probs, None if index is None else np.asarray(index))


def prior_offsets(p) -> np.ndarray:
    """log(p_m / p_0) with p clipped to [1e-6, 1 - 1e-6]; state 0 maps to 0."""
    p = np.clip(np.asarray(p, dtype=float), PRIOR_CLIP, 1.0 - PRIOR_CLIP)
    out = np.log(p) - np.log(p[..., :1])
    out[..., 0] = 0.0
    return out


def attach_priors(net: CausalNetwork, prior_field: PriorField, index=None) -> dict:
    """Per-location logit offsets for every prior-attached node.

    With ``index`` given, rows are selected by location id and a location
    absent from the prior field is an error.
    """
    if index is not None:
        pos = {int(v): j for j, v in enumerate(prior_field.index)}
        try:
            rows = np.array([pos[int(l)] for l in index], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"no prior for location {exc.args[0]}") from None
    out = {}
    for node in net.prior_nodes:
        if node not in prior_field.probs:
            continue
        p = prior_field.probs[node]
        if p.shape[1] != net.card[node]:
            raise ValueError(f"prior of {node!r} has {p.shape[1]} states, node has {net.card[node]}")
        out[node] = prior_offsets(p if index is None else p[rows])
    return out
