"""Per-region consensus ADMM for the state verification least-squares problem.

Each region ``i`` keeps, for every time index ``t`` of the horizon, a local
copy ``x`` of its variables plus the neighbor average ``psi`` and the
consensus target ``upsilon``. One round is::

    x     <- M (S_a' s + c1 S_p' p_sched + c2 D upsilon)
    psi   <- Dbar sum_j S_ij' (S_ji x_j)
    upsilon <- upsilon + psi_new - (psi_old + x_old) / 2

with ``M = (H' H + S_a' S_a + c1 S_p' S_p + c2 D)^-1`` factored once.
Arrays are shaped ``(T, m_i)`` throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla

from .exceptions import DimensionError, UnderdeterminedError
from .grid import ConstraintMatrix, VariableSpace
from .partition import RegionView

SPD_RTOL = 1e-12


@dataclass(frozen=True)
class AdmmConfig:
    c1: float = 0.5
    c2: float = 0.5
    tol: float = 1e-3
    max_iter: int = 500
    horizon: tuple = (0,)
    paper_literal_update: bool = False
    ridge: float = 0.0
    x0_policy: str = "flat"
    upsilon_rule: str = "mixed"

    def __post_init__(self):
        object.__setattr__(self, "horizon", tuple(self.horizon))
        if self.c1 < 0:
            raise ValueError("c1 must be >= 0")
        if self.c2 <= 0:
            raise ValueError("c2 must be > 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if len(self.horizon) < 1:
            raise ValueError("horizon needs at least one time index")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.x0_policy not in ("flat", "schedule"):
            raise ValueError(f"unknown x0_policy {self.x0_policy!r}")
        if self.upsilon_rule not in ("mixed", "dual"):
            raise ValueError(f"unknown upsilon_rule {self.upsilon_rule!r}")

    @property
    def schedule_weight(self) -> float:
        # the literal update drops c1 from both the matrix and the rhs
        return 1.0 if self.paper_literal_update else self.c1

    @property
    def n_times(self) -> int:
        return len(self.horizon)


@dataclass(eq=False)
class AdmmState:
    """Mutable iterate bundle owned by one region's worker."""

    region: int
    view: RegionView = field(repr=False)
    config: AdmmConfig = field(repr=False)
    system: np.ndarray = field(repr=False)
    factor: tuple = field(repr=False)
    rhs_fixed: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    upsilon: np.ndarray = field(repr=False)
    x_prev: np.ndarray | None = field(default=None, repr=False)
    psi_prev: np.ndarray | None = field(default=None, repr=False)
    multiplier: np.ndarray | None = field(default=None, repr=False)
    k: int = 0

    def displacement(self) -> float:
        if self.x_prev is None:
            return np.inf
        return float(np.max(np.abs(self.x - self.x_prev), initial=0.0))


def system_matrix(view: RegionView, config: AdmmConfig) -> np.ndarray:
    """H'H + S_a'S_a + c1 S_p'S_p + c2 D (+ ridge I), dense ``(m_i, m_i)``."""
    A = view.H.T @ view.H
    A[view.measured_local, view.measured_local] += 1.0
    A[view.p_local, view.p_local] += config.schedule_weight
    A[np.diag_indices_from(A)] += config.c2 * view.D + config.ridge
    return A


def _factor(A: np.ndarray, what: str):
    w = np.linalg.eigvalsh(A)
    cutoff = SPD_RTOL * max(w[-1], 1.0)
    nullity = int(np.sum(w <= cutoff))
    if nullity:
        raise UnderdeterminedError(
            f"{what}: system matrix is singular (null-space dimension {nullity}); "
            "add measurements or enable the ridge term", nullity)
    return sla.cho_factor(A, lower=True)


def _as_times(arr, n_times: int, width: int, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (n_times, arr.shape[0]))
    if arr.shape != (n_times, width):
        raise DimensionError(f"{name} has shape {arr.shape}, expected ({n_times}, {width})")
    return arr


def initial_point(view: RegionView, space: VariableSpace, config: AdmmConfig,
                  schedule: np.ndarray) -> np.ndarray:
    """x0 per the configured policy: flat voltage profile, optionally p = schedule."""
    T = config.n_times
    x0 = np.zeros((T, view.m))
    v2 = [k for k, g in enumerate(view.local) if space.is_bus_var(g) and g % 3 == 2]
    x0[:, v2] = 1.0
    if config.x0_policy == "schedule":
        x0[:, view.p_local] = schedule
    return x0


def initialize(view: RegionView, config: AdmmConfig, measurements, schedule,
               x0: np.ndarray) -> AdmmState:
    """Factor the region system and set x0; psi and upsilon wait for :func:`seed_duals`.

    Parameters
    ----------
    measurements : array_like, shape (T, n_measured_i)
        Region's sensor readings in ``view.measured_local`` order.
    schedule : array_like, shape (T, n_scheduled_i)
        Scheduled p for ``view.p_buses``.
    x0 : ndarray, shape (T, m_i)

    Raises
    ------
    UnderdeterminedError
        The region's system matrix is not positive definite.
    """
    T = config.n_times
    s = _as_times(measurements, T, view.measured_local.size, "measurements")
    p = _as_times(schedule, T, view.p_local.size, "schedule")
    x0 = _as_times(x0, T, view.m, "x0").copy()
    A = system_matrix(view, config)
    factor = _factor(A, f"region {view.region}")
    rhs = np.zeros((T, view.m))
    rhs[:, view.measured_local] += s
    rhs[:, view.p_local] += config.schedule_weight * p
    return AdmmState(view.region, view, config, A, factor, rhs, x0,
                     psi=np.zeros_like(x0), upsilon=0.5 * x0)


def neighbor_average(view: RegionView, messages: Mapping[int, np.ndarray], n_times: int) -> np.ndarray:
    """Dbar sum_j S_ij' m_j, validating one message per neighbor."""
    missing = set(view.shared) - set(messages)
    if missing:
        raise DimensionError(f"region {view.region}: missing messages from {sorted(missing)}")
    extra = set(messages) - set(view.shared)
    if extra:
        raise DimensionError(f"region {view.region}: messages from non-neighbors {sorted(extra)}")
    acc = np.zeros((n_times, view.m))
    for j, pos in view.shared.items():
        msg = np.asarray(messages[j], dtype=float)
        if msg.shape != (n_times, pos.size):
            raise DimensionError(
                f"message {j}->{view.region} has shape {msg.shape}, expected ({n_times}, {pos.size})")
        acc[:, pos] += msg
    return acc * view.Dbar


def seed_duals(state: AdmmState, messages: Mapping[int, np.ndarray]) -> None:
    """psi0 from the neighbors' x0, upsilon0 = (psi0 + x0) / 2."""
    state.psi = neighbor_average(state.view, messages, state.config.n_times)
    state.upsilon = 0.5 * (state.psi + state.x)
    if state.config.upsilon_rule == "dual":
        state.multiplier = np.zeros_like(state.x)
        state.upsilon = _upsilon_from_multiplier(state)


def x_update(state: AdmmState) -> np.ndarray:
    """Solve the cached SPD system; keeps the previous iterate in ``x_prev``."""
    c2D = state.config.c2 * state.view.D
    rhs = state.rhs_fixed + c2D * state.upsilon
    x_new = sla.cho_solve(state.factor, rhs.T).T
    state.x_prev = state.x
    state.x = x_new
    state.k += 1
    return x_new


def extract_shared(state: AdmmState, j: int) -> np.ndarray:
    """S_ij x: the slice region ``state.region`` sends to neighbor ``j``."""
    try:
        pos = state.view.shared[j]
    except KeyError:
        raise KeyError(f"region {j} is not a neighbor of region {state.region}") from None
    return state.x[:, pos].copy()


def psi_update(state: AdmmState, messages: Mapping[int, np.ndarray]) -> np.ndarray:
    state.psi_prev = state.psi
    state.psi = neighbor_average(state.view, messages, state.config.n_times)
    return state.psi


def _upsilon_from_multiplier(state: AdmmState) -> np.ndarray:
    c2 = state.config.c2
    sup = state.view.D > 0
    ups = np.zeros_like(state.x)
    ups[:, sup] = (-state.view.Dbar[sup] * state.multiplier[:, sup] / (2 * c2)
                   + 0.5 * (state.x[:, sup] + state.psi[:, sup]))
    return ups


def upsilon_update(state: AdmmState) -> np.ndarray:
    """upsilon_{k+1} = upsilon_k + psi_{k+1} - (psi_k + x_k) / 2.

    Entries outside the shared support are multiplied by D = 0 in the
    x-update and have no effect; the recursion is applied to them anyway.
    With ``upsilon_rule="dual"`` the equivalent explicit-multiplier form
    ``lam += c2 D (x - psi)`` is used instead and off-support entries are 0.
    """
    if state.config.upsilon_rule == "dual":
        state.multiplier = state.multiplier + state.config.c2 * state.view.D * (state.x - state.psi)
        state.upsilon = _upsilon_from_multiplier(state)
        return state.upsilon
    state.upsilon = state.upsilon + state.psi - 0.5 * (state.psi_prev + state.x_prev)
    return state.upsilon


def has_converged(states, tol: float) -> bool:
    """All regions moved by at most ``tol`` (inf-norm over every t) last round."""
    if isinstance(states, AdmmState):
        states = [states]
    else:
        states = list(states.values()) if isinstance(states, Mapping) else list(states)
    return all(s.displacement() <= tol for s in states)


# --------------------------------------------------------------- oracle

def solve_centralized(space: VariableSpace, constraints: ConstraintMatrix | None,
                      measurements: np.ndarray, schedule: np.ndarray, config: AdmmConfig,
                      views: Mapping[int, RegionView] | None = None,
                      scheduled_buses: Sequence[int] | None = None) -> np.ndarray:
    """Dense normal-equations minimizer of the undecomposed objective.

    Without ``views`` this is the single-copy problem::

        sum_t |s - x_a|^2 + |H x|^2 + c1 |p_sched - S_p x|^2

    With ``views`` every region contributes its own copy of the terms with
    ``x_i = S_i x`` substituted, i.e. the consensus-feasible optimum the
    decentralized iteration converges to. Variables covered by no view are
    returned as NaN.

    Parameters
    ----------
    measurements : ndarray, shape (T, m)
        Full-length readings; entries of unmeasured variables are ignored.
    schedule : ndarray, shape (T, n_buses)
        Scheduled p in bus order.
    scheduled_buses : sequence of int, optional
        Buses carrying a schedule term in the single-copy form; defaults to
        all buses except the first (the substation).
    """
    s = np.atleast_2d(np.asarray(measurements, dtype=float))
    p = np.atleast_2d(np.asarray(schedule, dtype=float))
    T, m = s.shape
    w = config.schedule_weight
    A = np.zeros((m, m))
    b = np.zeros((T, m))
    if views is None:
        H = constraints.H.toarray()
        A += H.T @ H
        meas = space.measured_indices
        A[meas, meas] += 1.0
        b[:, meas] += s[:, meas]
        if scheduled_buses is None:
            scheduled_buses = space.bus_ids[1:]
        bpos = {bid: k for k, bid in enumerate(space.bus_ids)}
        for bus in scheduled_buses:
            g = space.bus_var(bus, "p")
            A[g, g] += w
            b[:, g] += w * p[:, bpos[bus]]
        covered = np.ones(m, dtype=bool)
    else:
        covered = np.zeros(m, dtype=bool)
        bpos = {bid: k for k, bid in enumerate(space.bus_ids)}
        for v in views.values():
            L = v.local
            covered[L] = True
            A[np.ix_(L, L)] += v.H.T @ v.H
            gm = L[v.measured_local]
            A[gm, gm] += 1.0
            b[:, gm] += s[:, gm]
            gp = L[v.p_local]
            A[gp, gp] += w
            b[:, gp] += w * p[:, [bpos[bb] for bb in v.p_buses]]
    idx = np.flatnonzero(covered)
    A_c = A[np.ix_(idx, idx)] + config.ridge * np.eye(idx.size)
    factor = _factor(A_c, "centralized problem")
    x = np.full((T, m), np.nan)
    x[:, idx] = sla.cho_solve(factor, b[:, idx].T).T
    return x
