"""Causal network topology, weights and exact node densities.

The network has three layers: an (implicit) initial disaster feeding per-cell
prior evidence, the latent hazard nodes BD/LS/LF, and two observed leaves: the
log-normal damage proxy ``y`` and the XOR node ``u`` encoding mutual exclusion
of landslide and liquefaction.  A leak node (index 0, always on) lets any
child activate with all parents inactive.

Parent ``k`` enters a child's logits through its numeric state ``x_k`` (not a
one-hot code), so an inactive parent contributes nothing.  State 0 is the
baseline class of every latent node: all state-0 weights are pinned to zero.
"""
from __future__ import annotations

import enum
import graphlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

LEAK = "leak"
OBS = "y"
XOR = "u"
SWEEP_ORDER = ("LS", "LF", "BD")
MIN_SIGMA_XOR = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


class HazardKind(str, enum.Enum):
    BD = "BD"
    LS = "LS"
    LF = "LF"

    def __str__(self) -> str:
        return self.value


class NetworkError(ValueError):
    """Raised for a malformed network description."""


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative network description.

    ``cardinality`` maps each latent node to M_i (the node has M_i + 1
    states).  ``edges`` are (source, target) pairs over latent names plus
    ``"leak"``, ``"y"`` and ``"u"``; the leak node is implicitly a parent of
    every latent node and of ``y``, so leak edges are optional.  ``priors``
    lists the latent nodes that receive per-location prior evidence.
    """

    cardinality: Mapping[str, int]
    edges: tuple[tuple[str, str], ...]
    priors: tuple[str, ...] = ("LS", "LF", "BD")

    @classmethod
    def paper_topology(cls, m_bd: int = 3, m_ls: int = 1, m_lf: int = 1, xor: bool = True) -> "NetworkSpec":
        edges = [("LS", "BD"), ("LF", "BD"), ("BD", OBS), ("LS", OBS), ("LF", OBS), (LEAK, OBS)]
        if xor:
            edges += [("LS", XOR), ("LF", XOR)]
        return cls({"BD": m_bd, "LS": m_ls, "LF": m_lf}, tuple(edges))

    def to_dict(self) -> dict:
        return {
            "cardinality": dict(self.cardinality),
            "edges": [list(e) for e in self.edges],
            "priors": list(self.priors),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        return cls(
            cardinality={str(k): int(v) for k, v in d["cardinality"].items()},
            edges=tuple((str(a), str(b)) for a, b in d["edges"]),
            priors=tuple(d.get("priors", ("LS", "LF", "BD"))),
        )


@dataclass(frozen=True)
class CausalNetwork:
    """Validated, immutable network handle.

    Latent nodes are indexed in the fixed sweep order LS, LF, BD (restricted
    to the nodes present).  ``card[i]`` is the number of states M_i + 1.
    """

    latent: tuple[str, ...]
    card: Mapping[str, int]
    parents: Mapping[str, tuple[str, ...]]
    obs_parents: tuple[str, ...]
    xor_parents: tuple[str, ...] | None
    prior_nodes: tuple[str, ...]
    children: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def M(self, node: str) -> int:
        return self.card[node] - 1

    @property
    def nodes(self) -> tuple[str, ...]:
        extra = (XOR,) if self.xor_parents else ()
        return self.latent + (LEAK, OBS) + extra

    def spouses(self, node: str, child: str) -> tuple[str, ...]:
        """Other parents of ``child`` besides ``node``."""
        if child == OBS:
            pa = self.obs_parents
        elif child == XOR:
            pa = self.xor_parents or ()
        else:
            pa = self.parents[child]
        return tuple(p for p in pa if p != node)

    def without(self, node: str) -> "CausalNetwork":
        """Network with ``node`` and all its edges deleted (used for pruned cells)."""
        if node not in self.latent:
            return self
        latent = tuple(n for n in self.latent if n != node)
        parents = {n: tuple(p for p in self.parents[n] if p != node) for n in latent}
        xor = self.xor_parents
        if xor is not None and node in xor:
            xor = None
        return _finish(
            latent,
            {n: self.card[n] for n in latent},
            parents,
            tuple(p for p in self.obs_parents if p != node),
            xor,
            tuple(p for p in self.prior_nodes if p != node),
        )


def _finish(latent, card, parents, obs_parents, xor_parents, prior_nodes) -> CausalNetwork:
    children = {n: [] for n in latent}
    for child in latent:
        for p in parents[child]:
            children[p].append(child)
    return CausalNetwork(
        latent=latent,
        card=dict(card),
        parents=dict(parents),
        obs_parents=obs_parents,
        xor_parents=xor_parents,
        prior_nodes=prior_nodes,
        children={n: tuple(c) for n, c in children.items()},
    )


def build_network(spec: NetworkSpec) -> CausalNetwork:
    """Validate ``spec`` and return the immutable network handle."""
    kinds = {h.value for h in HazardKind}
    for name, m in spec.cardinality.items():
        if name not in kinds:
            raise NetworkError(f"unknown latent node {name!r}; expected one of {sorted(kinds)}")
        if int(m) < 1:
            raise NetworkError(f"cardinality M_{name} = {m} must be >= 1")
    latent_set = set(spec.cardinality)
    known = latent_set | {LEAK, OBS, XOR}
    for a, b in spec.edges:
        for n in (a, b):
            if n not in known:
                raise NetworkError(f"edge ({a}, {b}) references undeclared node {n!r}")

    ts = graphlib.TopologicalSorter()
    for n in known:
        ts.add(n)
    for a, b in spec.edges:
        ts.add(b, a)
    try:
        tuple(ts.static_order())
    except graphlib.CycleError as exc:
        raise NetworkError(f"cycle detected: {' -> '.join(exc.args[1])}") from None

    if not any(b == OBS for _, b in spec.edges):
        raise NetworkError("missing observation node 'y' (no edge points to it)")
    for a, b in spec.edges:
        if a in (OBS, XOR):
            raise NetworkError(f"observed node {a!r} cannot have children")
        if b == LEAK:
            raise NetworkError("leak node cannot have parents")
        if a == LEAK and b == XOR:
            raise NetworkError("XOR node cannot take the leak node as parent")

    xor_pa = tuple(a for a, b in spec.edges if b == XOR)
    if XOR in {b for _, b in spec.edges} and len(set(xor_pa)) != 2:
        raise NetworkError(f"XOR node needs exactly 2 parents, got {len(set(xor_pa))}")

    latent = tuple(n for n in SWEEP_ORDER if n in latent_set)
    parents = {
        n: tuple(dict.fromkeys(a for a, b in spec.edges if b == n and a != LEAK)) for n in latent
    }
    obs_pa = tuple(dict.fromkeys(a for a, b in spec.edges if b == OBS and a != LEAK))
    for p in spec.priors:
        if p not in latent_set:
            raise NetworkError(f"prior attached to undeclared node {p!r}")
    return _finish(
        latent,
        {n: int(spec.cardinality[n]) + 1 for n in latent},
        parents,
        obs_pa,
        xor_pa or None,
        tuple(p for p in latent if p in spec.priors),
    )


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WeightSet:
    """All causal coefficients of the network (location invariant).

    parent[(k, i)][m]   coefficient of parent k's numeric state on logit m of i
    noise[i][m]         coefficient of the per-state noise eps_{i,m}
    leak[i][m]          leak (intercept) term of logit m of i
    prior[i]            attachment weight of the per-cell prior log-odds of i
    obs[k][m]           coefficient w_{k,y,m}; contributes obs[k][x_k] * x_k to log y
    obs_leak            w_{0,y}
    obs_noise           w_{eps,y}, standard deviation of log y (nonzero)
    sigma_xor           width of the Gaussian replacing the XOR Dirac constraint
    """

    parent: Mapping[tuple[str, str], np.ndarray]
    noise: Mapping[str, np.ndarray]
    leak: Mapping[str, np.ndarray]
    prior: Mapping[str, float]
    obs: Mapping[str, np.ndarray]
    obs_leak: float
    obs_noise: float
    sigma_xor: float = 0.1

    def __post_init__(self):
        for group in (self.parent, self.noise, self.leak, self.obs):
            for key, arr in group.items():
                arr = np.asarray(arr, dtype=float)
                if arr.ndim != 1 or arr.size < 2:
                    raise ValueError(f"weight vector {key!r} must be 1-D with >= 2 states")
                if arr[0] != 0.0:
                    raise ValueError(f"state-0 entry of {key!r} must be exactly 0, got {arr[0]}")
        object.__setattr__(self, "parent", {k: _ro(v) for k, v in self.parent.items()})
        object.__setattr__(self, "noise", {k: _ro(v) for k, v in self.noise.items()})
        object.__setattr__(self, "leak", {k: _ro(v) for k, v in self.leak.items()})
        object.__setattr__(self, "obs", {k: _ro(v) for k, v in self.obs.items()})
        object.__setattr__(self, "prior", {k: float(v) for k, v in self.prior.items()})
        if not math.isfinite(self.obs_noise) or self.obs_noise == 0.0:
            raise ValueError("obs_noise must be finite and nonzero")
        if not self.sigma_xor > 0:
            raise ValueError("sigma_xor must be positive")

    @classmethod
    def zeros(cls, net: CausalNetwork, obs_noise: float = 1.0, sigma_xor: float = 0.1) -> "WeightSet":
        return cls(
            parent={(k, i): np.zeros(net.card[i]) for i in net.latent for k in net.parents[i]},
            noise={i: np.zeros(net.card[i]) for i in net.latent},
            leak={i: np.zeros(net.card[i]) for i in net.latent},
            prior={i: 1.0 for i in net.prior_nodes},
            obs={k: np.zeros(net.card[k]) for k in net.obs_parents},
            obs_leak=0.0,
            obs_noise=obs_noise,
            sigma_xor=sigma_xor,
        )

    def replace(self, **changes) -> "WeightSet":
        d = dict(
            parent=self.parent, noise=self.noise, leak=self.leak, prior=self.prior,
            obs=self.obs, obs_leak=self.obs_leak, obs_noise=self.obs_noise, sigma_xor=self.sigma_xor,
        )
        d.update(changes)
        return WeightSet(**d)

    def to_dict(self) -> dict:
        return {
            "parent": {f"{k}->{i}": v.tolist() for (k, i), v in self.parent.items()},
            "noise": {k: v.tolist() for k, v in self.noise.items()},
            "leak": {k: v.tolist() for k, v in self.leak.items()},
            "prior": dict(self.prior),
            "obs": {k: v.tolist() for k, v in self.obs.items()},
            "obs_leak": self.obs_leak,
            "obs_noise": self.obs_noise,
            "sigma_xor": self.sigma_xor,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "WeightSet":
        return cls(
            parent={tuple(k.split("->")): v for k, v in d["parent"].items()},
            noise=dict(d["noise"]),
            leak=dict(d["leak"]),
            prior=dict(d["prior"]),
            obs=dict(d["obs"]),
            obs_leak=float(d["obs_leak"]),
            obs_noise=float(d["obs_noise"]),
            sigma_xor=float(d.get("sigma_xor", 0.1)),
        )


WEIGHT_GROUPS = ("parent", "noise", "leak", "prior", "obs", "obs_leak", "obs_noise")


def check_learn_groups(groups: Iterable[str]) -> tuple:
    """Validate learnable-group names: a group (``"obs"``) or a group restricted
    to one node or edge (``"leak:BD"``, ``"parent:LS->BD"``)."""
    out = tuple(groups)
    for g in out:
        if g.split(":", 1)[0] not in WEIGHT_GROUPS:
            raise ValueError(f"unknown weight group {g!r}; expected one of {list(WEIGHT_GROUPS)}, optionally as group:node")
    return out


def _group_selected(g: str, key, learn: set) -> bool:
    if g in learn:
        return True
    if key is None:
        return False
    name = "->".join(key) if isinstance(key, tuple) else key
    return f"{g}:{name}" in learn


class WeightLayout:
    """Flat-vector view of a WeightSet, with masks for the optimizer.

    ``free`` marks entries the M-step may change: state-0 entries, sigma_xor,
    the prior weight of non-learnable nodes and every group outside ``learn``
    stay fixed.  ``l1_obs`` and ``l1_prior`` select the two L-1 penalised groups.
    """

    def __init__(self, net: CausalNetwork, learn_prior: Iterable[str] = ("LS", "LF"),
                 learn: Iterable[str] | None = None):
        self.net = net
        learn_prior = set(learn_prior)
        learn = set(WEIGHT_GROUPS if learn is None else check_learn_groups(learn))
        entries = []  # (group, key, index)
        for i in net.latent:
            for k in net.parents[i]:
                entries += [("parent", (k, i), m) for m in range(net.card[i])]
        for i in net.latent:
            entries += [("noise", i, m) for m in range(net.card[i])]
            entries += [("leak", i, m) for m in range(net.card[i])]
        for i in net.prior_nodes:
            entries.append(("prior", i, None))
        for k in net.obs_parents:
            entries += [("obs", k, m) for m in range(net.card[k])]
        entries += [("obs_leak", None, None), ("obs_noise", None, None)]
        self.entries = entries
        self.size = len(entries)
        self.free = np.array(
            [
                _group_selected(g, key, learn) and (m is None or m > 0) and (g != "prior" or key in learn_prior)
                for g, key, m in entries
            ]
        )
        self.l1_obs = np.array([g == "obs" and m > 0 for g, _, m in entries])
        self.l1_prior = np.array([g == "prior" and key in ("LS", "LF") for g, key, _ in entries])
        self.noise_index = entries.index(("obs_noise", None, None))

    def pack(self, w: WeightSet) -> np.ndarray:
        out = np.empty(self.size)
        for j, (g, key, m) in enumerate(self.entries):
            if g in ("obs_leak", "obs_noise"):
                out[j] = getattr(w, g)
            elif g == "prior":
                out[j] = w.prior[key]
            else:
                out[j] = getattr(w, g)[key][m]
        return out

    def unpack(self, vec: np.ndarray, template: WeightSet) -> WeightSet:
        groups = {g: {k: np.array(v) for k, v in getattr(template, g).items()} for g in ("parent", "noise", "leak", "obs")}
        prior = dict(template.prior)
        scalars = {}
        for j, (g, key, m) in enumerate(self.entries):
            if g in ("obs_leak", "obs_noise"):
                scalars[g] = float(vec[j])
            elif g == "prior":
                prior[key] = float(vec[j])
            else:
                groups[g][key][m] = vec[j]
        return template.replace(prior=prior, **groups, **scalars)

    def label(self, j: int) -> str:
        g, key, m = self.entries[j]
        if isinstance(key, tuple):
            key = "->".join(key)
        return g if key is None else (f"{g}[{key}]" if m is None else f"{g}[{key}][{m}]")


# --------------------------------------------------------------------------
# exact node densities


def activation_logits(node: str, parent_states: Mapping[str, int], eps, w: WeightSet, offset=None) -> np.ndarray:
    """Logits z of ``node`` given numeric parent states and noise draw(s).

    ``eps`` is a scalar or a per-state vector; ``offset`` is the per-cell
    prior evidence (already scaled), added as a predetermined-weight parent.
    """
    z = np.array(w.leak[node], dtype=float)
    for (k, i), coef in w.parent.items():
        if i != node:
            continue
        if k not in parent_states:
            raise KeyError(f"missing parent state for {k!r} (parent of {node})")
        z = z + coef * parent_states[k]
    z = z + w.noise[node] * np.asarray(eps, dtype=float)
    if offset is not None:
        z = z + np.asarray(offset, dtype=float)
    z[..., 0] = 0.0
    return z


def conditional_categorical(z) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def observation_mean(parent_states: Mapping[str, int], w: WeightSet) -> float:
    mu = w.obs_leak
    for k, coef in w.obs.items():
        if k not in parent_states:
            raise KeyError(f"missing parent state for {k!r} (parent of y)")
        x = int(parent_states[k])
        mu += coef[x] * x
    return mu


def observation_logpdf(y, parent_states: Mapping[str, int], w: WeightSet):
    """Log-normal log density of the damage proxy ``y`` given its parents."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("observation y must be > 0")
    mu = observation_mean(parent_states, w)
    s = w.obs_noise
    ly = np.log(y)
    return -ly - math.log(abs(s)) - 0.5 * LOG_2PI - (ly - mu) ** 2 / (2.0 * s * s)


def xor_logpdf(u, parent_states: Mapping[str, int], sigma_xor: float):
    """log N(u; prod of parent states, sigma_xor^2)."""
    if not sigma_xor > 0:
        raise ValueError("sigma_xor must be positive")
    prod = 1.0
    for x in parent_states.values():
        prod *= x
    u = np.asarray(u, dtype=float)
    return -0.5 * LOG_2PI - math.log(sigma_xor) - (u - prod) ** 2 / (2.0 * sigma_xor**2)
