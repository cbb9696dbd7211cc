"""Random toy instances shared by the tests."""
from __future__ import annotations

import numpy as np

from qvcbi.bounds import Evidence
from qvcbi.graph import NetworkSpec, WeightLayout, WeightSet, build_network
from qvcbi.inference import initial_xi


def toy_network(rng, xor=None, max_m: int = 2):
    m = rng.integers(1, max_m + 1, size=3)
    xor = bool(rng.integers(2)) if xor is None else xor
    return build_network(NetworkSpec.paper_topology(int(m[0]), int(m[1]), int(m[2]), xor))


def bd_only_network(m: int = 1):
    return build_network(NetworkSpec({"BD": m}, (("BD", "y"), ("leak", "y")), priors=("BD",)))


def random_weights(net, rng, scale: float = 1.0) -> WeightSet:
    layout = WeightLayout(net)
    w = WeightSet.zeros(net)
    vec = layout.pack(w)
    draw = rng.normal(0.0, scale, layout.size)
    pinned = np.array([m == 0 for _, _, m in layout.entries])
    vec = np.where(pinned, 0.0, draw)
    vec[layout.noise_index] = rng.uniform(0.4, 1.2) * rng.choice([-1.0, 1.0])
    for j, (g, _, _) in enumerate(layout.entries):
        if g == "prior":
            vec[j] = rng.uniform(0.5, 1.5)
    w = layout.unpack(vec, w)
    return w.replace(sigma_xor=float(rng.uniform(0.3, 1.0)))


def random_q(net, L: int, rng) -> dict:
    return {i: rng.dirichlet(np.ones(net.card[i]), size=L) for i in net.latent}


def random_evidence(net, L: int, rng, priors: bool = True) -> Evidence:
    offs = {}
    if priors:
        for i in net.prior_nodes:
            o = rng.normal(0.0, 1.0, (L, net.card[i]))
            o[:, 0] = 0.0
            offs[i] = o
    log_y = rng.normal(-1.0, 1.0, L)
    return Evidence(log_y, np.zeros(L), offs)


def random_xi(net, L: int, rng) -> dict:
    return {i: rng.uniform(0.1, 3.0, (L, net.card[i])) for i in net.latent}


def instance(seed: int, L: int = 6, xor=None, max_m: int = 2):
    rng = np.random.default_rng(seed)
    net = toy_network(rng, xor, max_m)
    w = random_weights(net, rng)
    ev = random_evidence(net, L, rng)
    q = random_q(net, L, rng)
    return net, w, ev, q, rng


def tight_xi(net, w, ev, q):
    return initial_xi(net, w, ev, q)


# acceptance criterion outcomes, printed by conftest at the end of the session
ACCEPTANCE = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
