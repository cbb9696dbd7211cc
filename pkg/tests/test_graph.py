import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from oracles import mp_softmax
from qvcbi.graph import (
    HazardKind, NetworkError, NetworkSpec, WeightLayout, WeightSet, activation_logits, build_network,
    check_learn_groups, conditional_categorical, observation_logpdf, xor_logpdf,
)

LOG_2PI = math.log(2 * math.pi)


def full_net(m_bd=3, xor=True):
    return build_network(NetworkSpec.paper_topology(m_bd=m_bd, xor=xor))


# ---- build_network


def test_minimal_bd_network():
    net = build_network(NetworkSpec({"BD": 1}, (("BD", "y"), ("leak", "y")), priors=("BD",)))
    assert net.latent == ("BD",)
    assert net.nodes == ("BD", "leak", "y")
    assert net.card["BD"] == 2


def test_paper_topology_structure():
    net = full_net()
    assert net.latent == ("LS", "LF", "BD")
    assert set(net.nodes) == {"LS", "LF", "BD", "leak", "y", "u"}
    assert net.parents["BD"] == ("LS", "LF")
    assert set(net.obs_parents) == {"BD", "LS", "LF"}
    assert set(net.xor_parents) == {"LS", "LF"}
    assert net.prior_nodes == ("LS", "LF", "BD")
    assert net.spouses("LS", "BD") == ("LF",)
    assert set(net.spouses("BD", "y")) == {"LS", "LF"}
    assert net.spouses("LS", "u") == ("LF",)


def test_cycle_is_rejected():
    spec = NetworkSpec.paper_topology()
    bad = NetworkSpec(spec.cardinality, spec.edges + (("y", "BD"),))
    with pytest.raises(NetworkError, match="cycle"):
        build_network(bad)


def test_latent_cycle_is_rejected():
    spec = NetworkSpec.paper_topology()
    bad = NetworkSpec(spec.cardinality, spec.edges + (("BD", "LS"),))
    with pytest.raises(NetworkError, match="cycle"):
        build_network(bad)


@pytest.mark.parametrize(
    "card, edges, msg",
    [
        ({"BD": 0}, (("BD", "y"),), ">= 1"),
        ({"BD": 1}, (("BD", "leak"),), "observation"),
        ({"BD": 1, "LS": 1}, (("BD", "y"), ("LS", "u")), "XOR"),
        ({"XX": 1}, (("XX", "y"),), "unknown latent"),
        ({"BD": 1}, (("BD", "y"), ("QQ", "y")), "undeclared"),
    ],
)
def test_malformed_specs(card, edges, msg):
    with pytest.raises(NetworkError, match=msg):
        build_network(NetworkSpec(card, edges, priors=()))


def test_hazard_kinds():
    assert {h.value for h in HazardKind} == {"BD", "LS", "LF"}


def test_spec_round_trip():
    spec = NetworkSpec.paper_topology(m_bd=2, xor=False)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_without_drops_node_and_edges():
    red = full_net().without("BD")
    assert red.latent == ("LS", "LF")
    assert red.obs_parents == ("LS", "LF")
    assert red.children["LS"] == ()


# ---- weights


def test_state_zero_entries_must_be_zero():
    net = full_net()
    w = WeightSet.zeros(net)
    leak = dict(w.leak)
    leak["BD"] = np.array([0.1, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="state-0"):
        w.replace(leak=leak)


def test_obs_noise_must_be_nonzero():
    with pytest.raises(ValueError, match="nonzero"):
        WeightSet.zeros(full_net(), obs_noise=0.0)


def test_weightset_dict_round_trip():
    net = full_net()
    rng = np.random.default_rng(1)
    lay = WeightLayout(net)
    vec = np.where([m == 0 for _, _, m in lay.entries], 0.0, rng.normal(size=lay.size))
    vec[lay.noise_index] = 0.7
    w = lay.unpack(vec, WeightSet.zeros(net))
    back = WeightSet.from_dict(w.to_dict())
    np.testing.assert_array_equal(lay.pack(back), lay.pack(w))


def test_layout_pins_state_zero_and_respects_learn_groups():
    net = full_net()
    lay = WeightLayout(net, learn=("obs", "leak:BD"))
    for j, (g, key, m) in enumerate(lay.entries):
        expect = (g == "obs" and m > 0) or (g == "leak" and key == "BD" and m > 0)
        assert lay.free[j] == expect, lay.label(j)


def test_unknown_learn_group():
    with pytest.raises(ValueError, match="unknown weight group"):
        check_learn_groups(["bogus"])


# ---- activation_logits / conditional_categorical


def test_only_leak_survives_with_inactive_parents():
    net = full_net()
    w = WeightSet.zeros(net).replace(leak={**WeightSet.zeros(net).leak, "BD": np.array([0, 0.3, -0.2, 1.1])})
    z = activation_logits("BD", {"LS": 0, "LF": 0}, 0.0, w)
    np.testing.assert_array_equal(z, [0, 0.3, -0.2, 1.1])


def test_zero_weights_give_zero_logits():
    w = WeightSet.zeros(full_net())
    np.testing.assert_array_equal(activation_logits("BD", {"LS": 1, "LF": 1}, 0.7, w), np.zeros(4))


def test_activation_logit_example():
    net = full_net(m_bd=1)
    w0 = WeightSet.zeros(net)
    w = w0.replace(parent={**w0.parent, ("LS", "BD"): np.array([0.0, 2.0])},
                   leak={**w0.leak, "BD": np.array([0.0, 0.5])})
    z = activation_logits("BD", {"LS": 1, "LF": 0}, 0.0, w)
    assert z[1] == 2.5


def test_missing_parent_state():
    with pytest.raises(KeyError):
        activation_logits("BD", {"LS": 1}, 0.0, WeightSet.zeros(full_net()))


def test_softmax_examples():
    np.testing.assert_allclose(conditional_categorical([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(conditional_categorical([0, math.log(3)]), [0.25, 0.75], atol=1e-15)
    ref = [float(v) for v in mp_softmax([0, 1, 2])]
    np.testing.assert_allclose(conditional_categorical([0, 1, 2]), ref, rtol=0, atol=1e-12)


def test_softmax_overflow_safe():
    p = conditional_categorical([0.0, 1000.0, 999.0])
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(z, c):
    p = conditional_categorical(z)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(conditional_categorical(np.array(z) + c), p, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["BD", "LS", "LF"]))
def test_state_zero_logit_always_zero(seed, node):
    rng = np.random.default_rng(seed)
    net = full_net(m_bd=int(rng.integers(1, 4)))
    lay = WeightLayout(net)
    vec = np.where([m == 0 for _, _, m in lay.entries], 0.0, rng.normal(0, 3, lay.size))
    vec[lay.noise_index] = 1.0
    w = lay.unpack(vec, WeightSet.zeros(net))
    states = {k: int(rng.integers(net.card[k])) for k in net.parents[node]}
    eps = rng.normal(size=net.card[node])
    assert activation_logits(node, states, eps, w, offset=rng.normal(size=net.card[node]))[0] == 0.0


def test_inactive_parents_zero_weights_uniform():
    net = full_net()
    p = conditional_categorical(activation_logits("BD", {"LS": 0, "LF": 0}, 0.0, WeightSet.zeros(net)))
    np.testing.assert_allclose(p, np.full(4, 0.25), atol=1e-15)


# ---- observation and XOR densities


def test_observation_logpdf_zero_residual():
    net = full_net()
    w = WeightSet.zeros(net).replace(obs_leak=-1.3)
    y = math.exp(-1.3)
    got = observation_logpdf(y, {"BD": 0, "LS": 0, "LF": 0}, w)
    assert got == pytest.approx(1.3 - 0.5 * LOG_2PI, abs=1e-12)


def test_observation_logpdf_standard():
    w = WeightSet.zeros(full_net())
    assert observation_logpdf(1.0, {"BD": 0, "LS": 0, "LF": 0}, w) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)
    assert -0.5 * LOG_2PI == pytest.approx(-0.9189, abs=1e-4)


def test_observation_logpdf_matches_density():
    rng = np.random.default_rng(7)
    net = full_net()
    for _ in range(20):
        obs = {k: np.r_[0.0, rng.normal(size=net.card[k] - 1)] for k in net.obs_parents}
        w = WeightSet.zeros(net).replace(obs=obs, obs_leak=float(rng.normal()), obs_noise=float(rng.uniform(0.2, 2)))
        st_ = {k: int(rng.integers(net.card[k])) for k in net.obs_parents}
        y = float(rng.uniform(0.01, 1.0))
        mu = mp.mpf(w.obs_leak) + mp.fsum(mp.mpf(w.obs[k][x]) * x for k, x in st_.items())
        s = mp.mpf(w.obs_noise)
        dens = 1 / (mp.mpf(y) * s * mp.sqrt(2 * mp.pi)) * mp.e ** (-(mp.log(y) - mu) ** 2 / (2 * s * s))
        assert observation_logpdf(y, st_, w) == pytest.approx(float(mp.log(dens)), abs=1e-12)


def test_observation_rejects_nonpositive_y():
    with pytest.raises(ValueError):
        observation_logpdf(0.0, {"BD": 0, "LS": 0, "LF": 0}, WeightSet.zeros(full_net()))


@pytest.mark.parametrize("mu, s", [(-3.0, 0.3), (0.0, 1.0), (3.0, 2.0), (1.5, 0.5)])
def test_observation_density_integrates_to_one(mu, s):
    net = build_network(NetworkSpec({"BD": 1}, (("BD", "y"), ("leak", "y")), priors=()))
    w = WeightSet.zeros(net).replace(obs_leak=mu, obs_noise=s)
    # integrate over t = ln y on a wide grid; dy = y dt
    t = np.linspace(mu - 12 * s, mu + 12 * s, 200001)
    dens = np.exp(observation_logpdf(np.exp(t), {"BD": 0}, w)) * np.exp(t)
    assert abs(integrate.trapezoid(dens, t) - 1.0) < 1e-4


def test_xor_examples():
    base = -0.5 * LOG_2PI - math.log(0.1)
    assert xor_logpdf(0.0, {"LS": 0, "LF": 0}, 0.1) == pytest.approx(base, abs=1e-12)
    assert xor_logpdf(0.0, {"LS": 1, "LF": 2}, 0.1) == pytest.approx(-200 + base, abs=1e-9)
    assert xor_logpdf(0.0, {"LS": 0, "LF": 0}, 0.05) - xor_logpdf(0.0, {"LS": 0, "LF": 0}, 0.1) == pytest.approx(
        math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        xor_logpdf(0.0, {"LS": 0, "LF": 0}, 0.0)
