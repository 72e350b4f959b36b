"""False-data-injection models: sensor tampering, corrupted ADMM messages, stealth directions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, VariableIndexError

ATTACK_KINDS = ("none", "measurement", "state_update", "stealth")
NULL_RTOL = 1e-10


@dataclass(frozen=True)
class AttackSpec:
    """One adversarial region and what it tampers with.

    Parameters
    ----------
    attacker : int
        Region id of the compromised aggregator.
    kind : {"none", "measurement", "state_update", "stealth"}
    rho : float
        State-update magnitude factor: each corrupted message of length n
        is shifted by a vector of 2-norm ``rho * sqrt(n)``.
    perturbations : tuple of (variable, value)
        Sparse sensor offsets for ``kind="measurement"``; variables are names
        (``"p_42"``) or global indices.
    seed : int
    start_iteration : int
        First ADMM round that is corrupted.
    corrupt_own_state : bool
        Shift the attacker's stored iterate instead of each outgoing message,
        so every neighbor sees the same corruption.
    stealth_magnitude : float
        2-norm of a crafted stealth vector.
    """

    attacker: int = 0
    kind: str = "none"
    rho: float = 0.5
    perturbations: tuple = ()
    seed: int = 0
    start_iteration: int = 1
    corrupt_own_state: bool = False
    stealth_magnitude: float = 0.1

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "perturbations",
                           tuple((ref, float(v)) for ref, v in self.perturbations))
        if self.kind == "state_update" and not self.rho > 0:
            raise ValueError("rho must be > 0 for a state-update attack")
        if self.kind != "none" and self.attacker < 1:
            raise ValueError("an attack needs an attacker region id >= 1")
        if self.start_iteration < 1:
            raise ValueError("start_iteration must be >= 1")

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def corrupts_messages(self, region: int, k: int) -> bool:
        return (self.kind == "state_update" and region == self.attacker
                and k >= self.start_iteration)


NO_ATTACK = AttackSpec()


def perturb_measurements(s, spec: AttackSpec, measured_index, space=None) -> np.ndarray:
    """Return a copy of the attacker's readings with the sparse offsets added.

    Parameters
    ----------
    s : array_like, shape (T, n) or (n,)
        Readings in the order of ``measured_index``.
    measured_index : array_like of int
        Global variable index of each reading column.
    space : VariableSpace, optional
        Needed to resolve variable names in ``spec.perturbations``.

    Raises
    ------
    VariableIndexError
        An offset targets a variable the attacker does not measure.
    """
    s_tilde = np.array(s, dtype=float, copy=True)
    if spec.kind != "measurement":
        return s_tilde
    col = {int(g): c for c, g in enumerate(measured_index)}
    for ref, value in spec.perturbations:
        if isinstance(ref, str):
            if space is None:
                raise VariableIndexError(f"cannot resolve {ref!r} without a variable space")
            g = space.index_of(ref)
        else:
            g = int(ref)
        if g not in col:
            raise VariableIndexError(f"variable {ref!r} is not measured by region {spec.attacker}")
        s_tilde[..., col[g]] += value
    return s_tilde


def attack_vector(spec: AttackSpec, k: int, neighbor: int, t: int, n: int) -> np.ndarray:
    """Random direction of 2-norm ``rho * sqrt(n)``, fixed by (seed, k, neighbor, t)."""
    if n == 0:
        return np.zeros(0)
    rng = np.random.default_rng([spec.seed, k, neighbor, t])
    g = rng.standard_normal(n)
    return g * (spec.rho * np.sqrt(n) / np.linalg.norm(g))


def perturb_outgoing_state(message, spec: AttackSpec, k: int, neighbor: int,
                           horizon=None) -> np.ndarray:
    """Add a fresh attack vector to every time slice of an outgoing message.

    ``message`` is ``(T, n)``; ``horizon`` gives the time labels used to seed
    each row (defaults to ``0..T-1``). Messages sent before
    ``spec.start_iteration`` pass through unchanged.
    """
    msg = np.atleast_2d(np.array(message, dtype=float, copy=True))
    if spec.kind != "state_update" or k < spec.start_iteration:
        return msg
    T, n = msg.shape
    labels = range(T) if horizon is None else horizon
    for row, t in enumerate(labels):
        msg[row] += attack_vector(spec, k, neighbor, int(t), n)
    return msg


# ---------------------------------------------------------------- stealth

@dataclass(frozen=True, eq=False)
class StealthReport:
    """Null space of the victim's constraint rows restricted to shared columns."""

    dimension: int
    basis: np.ndarray = field(repr=False)
    operator: np.ndarray = field(repr=False)
    singular_values: np.ndarray = field(repr=False)

    @property
    def feasible(self) -> bool:
        return self.dimension > 0


def stealth_feasibility(H_i, shared_positions) -> StealthReport:
    """SVD-based null space of ``H_i S_ij'`` (the columns ``shared_positions`` of H_i).

    Singular values below ``1e-10 * max`` count as zero.
    """
    H_i = np.atleast_2d(np.asarray(H_i, dtype=float))
    pos = np.asarray(shared_positions, dtype=int)
    A = H_i[:, pos] if H_i.size else np.zeros((0, pos.size))
    n = pos.size
    if n == 0:
        raise DimensionError("empty shared set")
    if A.shape[0] == 0:
        return StealthReport(n, np.eye(n), A, np.zeros(0))
    _, sv, vt = np.linalg.svd(A, full_matrices=True)
    cutoff = NULL_RTOL * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > cutoff)) if sv.size and sv[0] > 0 else 0
    basis = vt[rank:].T.copy()
    return StealthReport(n - rank, basis, A, sv)


@dataclass(frozen=True, eq=False)
class StealthAttack:
    feasible: bool
    vector: np.ndarray | None = None
    residual: float | None = None


def craft_stealth_attack(report: StealthReport, magnitude: float, seed: int = 0) -> StealthAttack:
    """Seeded combination of null-space directions scaled to ``magnitude``.

    Returns an infeasible result, not an exception, when the null space is
    trivial.
    """
    if not report.feasible:
        return StealthAttack(False)
    rng = np.random.default_rng(seed)
    coef = rng.uniform(-1.0, 1.0, report.dimension)
    a = report.basis @ coef
    norm = np.linalg.norm(a)
    if norm == 0:
        a = report.basis[:, 0].copy()
        norm = 1.0
    a *= magnitude / norm
    residual = float(np.max(np.abs(report.operator @ a), initial=0.0))
    return StealthAttack(True, a, residual)
