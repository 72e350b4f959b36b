"""Disagreement scores, trust matrix and trust-score verdicts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .exceptions import DimensionError, PartitionError
from .partition import CommunicationGraph


def harmonic_alpha(k: int) -> float:
    return 1.0 / k


@dataclass(frozen=True)
class DetectionConfig:
    """Detection-loop knobs.

    ``beta`` is either one multiplier for every region or a mapping region ->
    multiplier. ``periodic_fix`` picks how periodic trust chains are made
    aperiodic: ``"lazy"`` iterates ``(I + B) / 2`` (same stationary vector),
    ``"damped"`` mixes toward uniform with weight ``1 - damping``.

    ``presence_floor`` is the smallest mean disagreement (in d units) the
    neighbors of an accused region must report before an attacker verdict
    is issued. Trust scores only rank regions against each other, so without
    an absolute floor the small residual disagreements of an honest run
    would still single out the best-connected region.
    """

    alpha: Callable[[int], float] = harmonic_alpha
    eps_pi: float = 1e-3
    beta: float | Mapping[int, float] = 2.0
    eps_norm: float = 1e-9
    enabled: bool = True
    periodic_fix: str = "lazy"
    damping: float = 0.99
    power_tol: float = 1e-12
    power_max_iter: int = 100_000
    plain_max_iter: int = 2048
    presence_floor: float = 1e-3

    def __post_init__(self):
        if self.eps_pi <= 0:
            raise ValueError("eps_pi must be > 0")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be > 0")
        betas = self.beta.values() if isinstance(self.beta, Mapping) else [self.beta]
        if any(b <= 0 for b in betas):
            raise ValueError("beta must be > 0")
        if self.periodic_fix not in ("lazy", "damped"):
            raise ValueError(f"unknown periodic_fix {self.periodic_fix!r}")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must be in (0, 1]")
        if self.power_max_iter < 1 or self.plain_max_iter < 1:
            raise ValueError("power iteration budgets must be >= 1")
        if self.presence_floor < 0:
            raise ValueError("presence_floor must be >= 0")

    def beta_for(self, region: int) -> float:
        if isinstance(self.beta, Mapping):
            return float(self.beta[region])
        return float(self.beta)

    def alpha_at(self, k: int) -> float:
        if k < 1:
            raise ValueError("detection rounds start at k = 1")
        a = float(self.alpha(k))
        if not 0 < a <= 1:
            raise ValueError(f"alpha_{k} = {a} is outside (0, 1]")
        return a


def update_disagreement(d_prev: float, x_i_shared, x_j_shared, k: int,
                        config: DetectionConfig | None = None) -> float:
    """Exponential moving average of the mean squared shared-slice gap.

    ``x_i_shared`` / ``x_j_shared`` are ``(T, n)`` (or ``(n,)`` for a single
    time index): region i's own slice and the slice it received from j.
    """
    config = config or DetectionConfig()
    xi = np.atleast_2d(np.asarray(x_i_shared, dtype=float))
    xj = np.atleast_2d(np.asarray(x_j_shared, dtype=float))
    if xi.shape != xj.shape:
        raise DimensionError(f"shared slices differ in shape: {xi.shape} vs {xj.shape}")
    T, n = xi.shape
    if n == 0:
        raise DimensionError("empty shared slice")
    a = config.alpha_at(k)
    gap = float(np.sum((xi - xj) ** 2))
    return (a / 4.0) / (n * T) * gap + (1.0 - a) * float(d_prev)


def build_trust_matrix(d: Mapping[tuple[int, int], float], graph: CommunicationGraph,
                       config: DetectionConfig | None = None) -> np.ndarray:
    """Row-normalized disagreement matrix, rows/cols in ``graph.nodes`` order.

    Each row is first divided by (row sum + eps_norm) and then rescaled to sum
    exactly to one; an all-zero row spreads its mass evenly over neighbors.
    """
    config = config or DetectionConfig()
    nodes = graph.nodes
    pos = {n: k for k, n in enumerate(nodes)}
    N = len(nodes)
    B = np.zeros((N, N))
    for i in nodes:
        nbrs = graph.neighbors(i)
        if not nbrs:
            raise PartitionError(f"region {i} has no neighbors; trust matrix undefined")
        row = np.array([float(d[(i, j)]) for j in nbrs])
        if np.any(row < 0):
            raise ValueError(f"negative disagreement in row {i}")
        row = row / (row.sum() + config.eps_norm)
        s = row.sum()
        row = row / s if s > 0 else np.full(len(nbrs), 1.0 / len(nbrs))
        for j, val in zip(nbrs, row):
            B[pos[i], pos[j]] = val
    return B


def chain_period(B: np.ndarray) -> int:
    """Period of the chain restricted to the class reachable from state 0."""
    N = B.shape[0]
    level = {0: 0}
    frontier = [0]
    g = 0
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(B[u] > 0):
                v = int(v)
                if v not in level:
                    level[v] = level[u] + 1
                    nxt.append(v)
                else:
                    g = math.gcd(g, level[u] + 1 - level[v])
        frontier = nxt
    return g if g > 0 else 1 if N == 1 else 0


@dataclass(frozen=True)
class StationaryInfo:
    iterations: int
    converged: bool
    periodic: bool
    fix: str | None


def _power_iterate(B: np.ndarray, tol: float, max_iter: int, check_every: int = 16):
    # the stopping test runs every few steps; numpy call overhead dominates on tiny chains
    N = B.shape[0]
    pi = np.full(N, 1.0 / N)
    it = 0
    while it < max_iter:
        for _ in range(min(check_every - 1, max_iter - it - 1)):
            pi = pi @ B
        new = pi @ B
        new /= new.sum()
        it += min(check_every, max_iter - it)
        if np.max(np.abs(new - pi)) < tol:
            return new, it, True
        pi = new
    return pi, max_iter, False


def stationary_distribution(B: np.ndarray, config: DetectionConfig | None = None
                            ) -> tuple[np.ndarray, StationaryInfo]:
    """Left eigenvector of B for eigenvalue 1 by power iteration.

    Periodic chains (period > 1, detected structurally) are iterated on an
    aperiodic surrogate per ``config.periodic_fix``. Aperiodic chains that do
    not settle within ``plain_max_iter`` steps (an eigenvalue close to -1)
    switch to the lazy surrogate, which keeps the same stationary vector.
    """
    config = config or DetectionConfig()
    B = np.asarray(B, dtype=float)
    N = B.shape[0]
    if B.shape != (N, N):
        raise DimensionError("B must be square")
    if N == 1:
        return np.ones(1), StationaryInfo(0, True, False, None)

    def surrogate():
        if config.periodic_fix == "lazy":
            return 0.5 * (np.eye(N) + B)
        return config.damping * B + (1 - config.damping) / N

    period = chain_period(B)
    if period <= 1:
        pi, it, ok = _power_iterate(B, config.power_tol, min(config.plain_max_iter, config.power_max_iter))
        if ok:
            return pi, StationaryInfo(it, True, False, None)
        lazy = 0.5 * (np.eye(N) + B)
        pi, more, ok = _power_iterate(lazy, config.power_tol, config.power_max_iter)
        return pi, StationaryInfo(it + more, ok, False, "lazy")
    pi, it, ok = _power_iterate(surrogate(), config.power_tol, config.power_max_iter)
    return pi, StationaryInfo(it, ok, True, config.periodic_fix)


def excluded_stats(pi, i: int) -> tuple[float, float]:
    """Mean and population std of the entries of ``pi`` other than position ``i``."""
    pi = np.asarray(pi, dtype=float)
    N = pi.size
    if N < 2:
        raise ValueError("excluded statistics need at least two regions")
    others = np.delete(pi, i)
    mu = others.sum() / (N - 1)
    sigma = math.sqrt(np.sum((others - mu) ** 2) / (N - 1))
    return float(mu), float(sigma)


@dataclass(frozen=True)
class Verdict:
    kind: str  # "none" | "attacker" | "inconclusive"
    region: int | None = None

    def __str__(self):
        return f"attacker({self.region})" if self.kind == "attacker" else self.kind


NO_ATTACKER = Verdict("none")
INCONCLUSIVE = Verdict("inconclusive")


def check_verdict(pi, pi_prev, regions, config: DetectionConfig | None = None,
                  evidence: Mapping[int, float] | None = None) -> Verdict:
    """Attacker verdict once pi has settled and one score is an outlier.

    ``regions`` gives the region id of each position in ``pi``. Ties in the
    arg max go to the lowest region id. ``evidence`` maps a region to the
    mean disagreement its neighbors hold against it; when given, an accused
    region at or below ``config.presence_floor`` yields ``none``.
    """
    config = config or DetectionConfig()
    pi = np.asarray(pi, dtype=float)
    if pi_prev is None or np.max(np.abs(pi - np.asarray(pi_prev, dtype=float))) > config.eps_pi:
        return INCONCLUSIVE
    if pi.size < 2:
        return NO_ATTACKER
    flagged = False
    for k, r in enumerate(regions):
        mu, sigma = excluded_stats(pi, k)
        if pi[k] > mu + config.beta_for(r) * sigma:
            flagged = True
            break
    if not flagged:
        return NO_ATTACKER
    top = pi.max()
    accused = min(r for k, r in enumerate(regions) if pi[k] == top)
    if evidence is not None and evidence[accused] <= config.presence_floor:
        return NO_ATTACKER
    return Verdict("attacker", accused)


def neighbor_evidence(d: Mapping[tuple[int, int], float], graph: CommunicationGraph) -> dict[int, float]:
    """Mean of d_ij over the neighbors i of each region j."""
    out = {}
    for j in graph.nodes:
        nbrs = graph.neighbors(j)
        out[j] = float(np.mean([d[(i, j)] for i in nbrs])) if nbrs else 0.0
    return out


@dataclass(eq=False)
class TrustState:
    """Detection-loop state for one connected group of regions."""

    graph: CommunicationGraph
    config: DetectionConfig = field(default_factory=DetectionConfig)
    d: dict = field(default_factory=dict)
    B: np.ndarray | None = None
    pi: np.ndarray | None = None
    pi_prev: np.ndarray | None = None
    verdict: Verdict = INCONCLUSIVE
    k: int = 0
    info: StationaryInfo | None = None

    def __post_init__(self):
        if not self.d:
            self.d = {e: 0.0 for e in self.graph.directed_edges()}
        if self.pi is None:
            self.pi = np.zeros(len(self.graph.nodes))

    @property
    def regions(self) -> tuple[int, ...]:
        return self.graph.nodes

    def step(self, own: Mapping[tuple[int, int], np.ndarray],
             received: Mapping[tuple[int, int], np.ndarray]) -> Verdict:
        """One detection round.

        ``own[(i, j)]`` is S_ij x_i and ``received[(i, j)]`` the slice region i
        got from j this round.
        """
        self.k += 1
        for e in self.graph.directed_edges():
            self.d[e] = update_disagreement(self.d[e], own[e], received[e], self.k, self.config)
        self.recompute()
        return self.verdict

    def recompute(self) -> Verdict:
        self.B = build_trust_matrix(self.d, self.graph, self.config)
        self.pi_prev = self.pi
        self.pi, self.info = stationary_distribution(self.B, self.config)
        prev = None if self.k < 2 else self.pi_prev
        self.verdict = check_verdict(self.pi, prev, self.regions, self.config,
                                     neighbor_evidence(self.d, self.graph))
        return self.verdict

    def pi_by_region(self) -> dict[int, float]:
        return {r: float(v) for r, v in zip(self.regions, self.pi)}
