import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridverify.detection import (
    INCONCLUSIVE,
    NO_ATTACKER,
    DetectionConfig,
    TrustState,
    Verdict,
    build_trust_matrix,
    chain_period,
    check_verdict,
    excluded_stats,
    neighbor_evidence,
    stationary_distribution,
    update_disagreement,
)
from gridverify.exceptions import DimensionError, PartitionError
from gridverify.partition import CommunicationGraph


def eigen_oracle(B):
    """Left eigenvector for the eigenvalue closest to 1, normalized to sum 1."""
    w, V = np.linalg.eig(B.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1))])
    return v / v.sum()


def full_d(graph, value=1.0):
    return {e: value for e in graph.directed_edges()}


TRIANGLE = CommunicationGraph.from_edges([1, 2, 3], [(1, 2), (2, 3), (1, 3)])
PAIR = CommunicationGraph.from_edges([1, 2], [(1, 2)])


# ------------------------------------------------------------ disagreement

def test_ema_identical_slices():
    x = np.arange(4.0)
    assert update_disagreement(0.8, x, x, 3) == pytest.approx((1 - 1 / 3) * 0.8)


def test_ema_first_round_forgets_history():
    d = update_disagreement(123.0, [2.0, 0, 0, 0], [0.0, 0, 0, 0], 1)
    assert d == 0.25


def test_ema_second_round():
    d = update_disagreement(0.25, [2.0, 0, 0, 0], [0.0, 0, 0, 0], 2)
    assert d == 0.25


def test_ema_averages_over_time():
    xi = np.array([[2.0, 0.0], [0.0, 0.0]])
    xj = np.zeros((2, 2))
    # alpha = 1: (1/4) / (2 * 2) * 4
    assert update_disagreement(0.0, xi, xj, 1) == 0.25


def test_ema_dimension_mismatch():
    with pytest.raises(DimensionError):
        update_disagreement(0.0, [1.0, 2.0], [1.0], 1)


def test_alpha_schedule_validated():
    with pytest.raises(ValueError):
        DetectionConfig().alpha_at(0)
    with pytest.raises(ValueError):
        DetectionConfig(alpha=lambda k: 2.0).alpha_at(1)


@pytest.mark.parametrize("kw", [dict(eps_pi=0), dict(eps_norm=0), dict(beta=0), dict(beta={1: -1.0}),
                                dict(periodic_fix="x"), dict(damping=0), dict(presence_floor=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DetectionConfig(**kw)


# ------------------------------------------------------------ trust matrix

def test_two_region_matrix():
    B = build_trust_matrix({(1, 2): 0.3, (2, 1): 0.3}, PAIR)
    assert np.array_equal(B, [[0.0, 1.0], [1.0, 0.0]])


def test_triangle_equal_scores():
    B = build_trust_matrix(full_d(TRIANGLE, 0.7), TRIANGLE)
    assert np.allclose(B, (np.ones((3, 3)) - np.eye(3)) / 2, atol=1e-15)


def test_all_zero_row_spreads_mass():
    B = build_trust_matrix(full_d(TRIANGLE, 0.0), TRIANGLE)
    assert np.array_equal(B.sum(axis=1), np.ones(3))
    assert B[0, 1] == B[0, 2] == 0.5


def test_isolated_region_rejected():
    g = CommunicationGraph.from_edges([1, 2, 3], [(1, 2)])
    with pytest.raises(PartitionError):
        build_trust_matrix({(1, 2): 1.0, (2, 1): 1.0}, g)


def test_negative_disagreement_rejected():
    with pytest.raises(ValueError):
        build_trust_matrix({(1, 2): -1.0, (2, 1): 1.0}, PAIR)


def test_golden_attack_matrix_rows(golden_prep):
    from gridverify.adversary import AttackSpec
    from gridverify.orchestrator import run_verification
    cfg = golden_prep.config.replace(attack=AttackSpec(1, "state_update", seed=3), max_restarts=0)
    rep = run_verification(cfg, golden_prep)
    B = build_trust_matrix(rep.phases[0].d, golden_prep.graph)
    assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-12
    assert np.all(B >= 0) and not np.diag(B).any()


# ------------------------------------------------------ stationary vector

def test_two_region_periodic_chain():
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert chain_period(B) == 2
    pi, info = stationary_distribution(B)
    assert np.allclose(pi, [0.5, 0.5], atol=1e-12)
    assert info.periodic and info.fix == "lazy"
    pi_d, info_d = stationary_distribution(B, DetectionConfig(periodic_fix="damped"))
    assert np.allclose(pi_d, [0.5, 0.5], atol=1e-12)
    assert info_d.fix == "damped"


def test_triangle_uniform():
    B = build_trust_matrix(full_d(TRIANGLE), TRIANGLE)
    assert chain_period(B) == 1
    pi, info = stationary_distribution(B)
    assert np.allclose(pi, 1 / 3, atol=1e-12)
    assert info.converged and info.fix is None


def test_single_region_distribution():
    pi, info = stationary_distribution(np.ones((1, 1)))
    assert pi.tolist() == [1.0]


def test_bipartite_square_is_periodic():
    square = CommunicationGraph.from_edges([1, 2, 3, 4], [(1, 2), (2, 3), (3, 4), (1, 4)])
    B = build_trust_matrix(full_d(square), square)
    assert chain_period(B) == 2
    pi, _ = stationary_distribution(B)
    assert np.allclose(pi, 0.25, atol=1e-12)


def _random_connected(rng, n):
    edges = {(int(rng.integers(0, k)) + 1, k + 1) for k in range(1, n)}
    for _ in range(int(rng.integers(0, n))):
        a, b = sorted(rng.choice(np.arange(1, n + 1), 2, replace=False).tolist())
        edges.add((a, b))
    return CommunicationGraph.from_edges(range(1, n + 1), edges)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 9), seed=st.integers(0, 2**32 - 1))
def test_stochastic_and_stationary(n, seed):
    rng = np.random.default_rng(seed)
    g = _random_connected(rng, n)
    d = {e: float(rng.exponential()) for e in g.directed_edges()}
    B = build_trust_matrix(d, g)
    assert np.all(B >= 0)
    assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-12
    pi, info = stationary_distribution(B)
    assert info.converged
    assert np.all(pi >= 0) and abs(pi.sum() - 1) < 1e-12
    assert np.max(np.abs(pi @ B - pi)) < 1e-10
    assert np.max(np.abs(pi - eigen_oracle(B))) < 1e-9


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 8), seed=st.integers(0, 2**32 - 1))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    g = _random_connected(rng, n)
    d = {e: float(rng.exponential()) for e in g.directed_edges()}
    perm = rng.permutation(n) + 1
    relabel = {k + 1: int(perm[k]) for k in range(n)}
    g2 = CommunicationGraph.from_edges(range(1, n + 1), [(relabel[a], relabel[b]) for a, b in g.edges])
    d2 = {(relabel[i], relabel[j]): v for (i, j), v in d.items()}
    B, B2 = build_trust_matrix(d, g), build_trust_matrix(d2, g2)
    P = np.zeros((n, n))
    for a, b in relabel.items():
        P[a - 1, b - 1] = 1.0
    assert np.allclose(P.T @ B @ P, B2, atol=1e-15)
    pi, _ = stationary_distribution(B)
    pi2, _ = stationary_distribution(B2)
    assert np.allclose(pi @ P, pi2, atol=1e-10)
    cfg = DetectionConfig(beta=0.5, presence_floor=0.0)
    v1 = check_verdict(pi, pi, g.nodes, cfg)
    v2 = check_verdict(pi2, pi2, g2.nodes, cfg)
    assert v1.kind == v2.kind
    if v1.kind == "attacker" and np.sum(pi == pi.max()) == 1:
        assert v2.region == relabel[v1.region]


# --------------------------------------------------------- excluded stats

def test_excluded_stats_two_equal():
    assert excluded_stats([0.5, 0.25, 0.25], 0) == (0.25, 0.0)


def test_excluded_stats_uniform():
    for i in range(5):
        mu, sigma = excluded_stats(np.full(5, 0.2), i)
        assert mu == pytest.approx(0.2, abs=1e-15) and sigma == pytest.approx(0.0, abs=1e-15)


def test_excluded_stats_hand_value():
    mu, sigma = excluded_stats([0.6, 0.2, 0.1, 0.1], 0)
    assert mu == pytest.approx(2 / 15, abs=1e-15)
    expected = math.sqrt(((0.2 - 2 / 15) ** 2 + 2 * (0.1 - 2 / 15) ** 2) / 3)
    assert sigma == pytest.approx(expected, abs=1e-15)


def test_excluded_stats_needs_two():
    with pytest.raises(ValueError):
        excluded_stats([1.0], 0)


# ---------------------------------------------------------------- verdict

def test_verdict_uniform_is_none():
    pi = np.full(5, 0.2)
    assert check_verdict(pi, pi, range(1, 6)) == NO_ATTACKER


def test_verdict_outlier():
    pi = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
    assert check_verdict(pi, pi, range(1, 6)) == Verdict("attacker", 1)


def test_verdict_oscillating_is_inconclusive():
    pi = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
    prev = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
    assert check_verdict(pi, prev, range(1, 6)) == INCONCLUSIVE
    assert check_verdict(pi, None, range(1, 6)) == INCONCLUSIVE


def test_verdict_tie_goes_to_lowest_id():
    pi = np.array([0.1, 0.35, 0.1, 0.35, 0.1])
    v = check_verdict(pi, pi, [3, 9, 4, 7, 1], DetectionConfig(beta=0.5))
    assert v == Verdict("attacker", 7)


def test_verdict_presence_floor():
    pi = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
    weak = {r: 1e-6 for r in range(1, 6)}
    strong = {**weak, 1: 0.05}
    assert check_verdict(pi, pi, range(1, 6), evidence=weak) == NO_ATTACKER
    assert check_verdict(pi, pi, range(1, 6), evidence=strong) == Verdict("attacker", 1)


def test_per_region_beta():
    pi = np.array([0.6, 0.15, 0.1, 0.1, 0.05])
    assert check_verdict(pi, pi, range(1, 6)) == Verdict("attacker", 1)
    cfg = DetectionConfig(beta={1: 1e6, 2: 2.0, 3: 2.0, 4: 2.0, 5: 2.0})
    assert check_verdict(pi, pi, range(1, 6), cfg) == NO_ATTACKER


def test_neighbor_evidence():
    d = {(1, 2): 0.2, (2, 1): 0.0, (2, 3): 0.4, (3, 2): 0.6, (1, 3): 0.0, (3, 1): 0.0}
    ev = neighbor_evidence(d, TRIANGLE)
    assert ev == {1: 0.0, 2: pytest.approx(0.4), 3: pytest.approx(0.2)}


# ------------------------------------------------------------- TrustState

def test_trust_state_honest_decay():
    ts = TrustState(TRIANGLE)
    assert not ts.pi.any()
    x = {e: np.ones((1, 3)) for e in TRIANGLE.directed_edges()}
    verdicts = [ts.step(x, x) for _ in range(5)]
    assert verdicts[0] == INCONCLUSIVE
    assert verdicts[-1] == NO_ATTACKER
    assert all(v == 0 for v in ts.d.values())
    assert np.allclose(ts.pi, 1 / 3)


def test_trust_state_flags_liar():
    g = CommunicationGraph.from_edges(range(1, 6), [(1, 2), (1, 3), (1, 4), (2, 3), (3, 4), (4, 5), (2, 5)])
    ts = TrustState(g)
    rng = np.random.default_rng(0)
    verdict = INCONCLUSIVE
    for _ in range(40):
        own = {e: np.zeros((1, 4)) for e in g.directed_edges()}
        recv = {(i, j): (rng.standard_normal((1, 4)) if j == 1 else np.zeros((1, 4)))
                for (i, j) in g.directed_edges()}
        verdict = ts.step(own, recv)
        if verdict.kind == "attacker":
            break
    assert verdict == Verdict("attacker", 1)
    assert max(ts.pi_by_region(), key=ts.pi_by_region().get) == 1


def test_near_periodic_chain_switches_to_lazy():
    B = np.array([[0.0, 0.496, 0.504], [0.99956, 0.0, 0.00044], [0.99957, 0.00043, 0.0]])
    pi, info = stationary_distribution(B)
    assert info.converged and not info.periodic and info.fix == "lazy"
    assert info.iterations < 5000
    w, v = np.linalg.eig(B.T)
    ref = np.real(v[:, np.argmin(np.abs(w - 1))])
    assert np.allclose(pi, ref / ref.sum(), atol=1e-10)
