"""Radial feeder model: case parsing, variable indexing, linear DistFlow rows.

Sign convention
---------------
The branch balance rows are used exactly as printed::

    p_to = P_l - sum(P_child) - r * c2_l
    q_to = Q_l - sum(Q_child) - x * c2_l
    v2_fr = v2_to + 2 (r P_l + x Q_l) - |z|^2 c2_l
    v2_fr = (P_l^2 + Q_l^2) / c2_l

with case-file demands entering as negative injections ``p = -Pd``. The
power-flow oracle solves these same equations, so ground-truth vectors are
consistent with the assembled constraint matrix by construction.
"""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import (
    DimensionError,
    OracleDivergenceError,
    ParseError,
    RadialityError,
    TopologyError,
    VariableIndexError,
)

BUS_KINDS = ("p", "q", "v2")
BRANCH_KINDS = ("P", "Q", "c2", "xp")
FAMILIES = ("1a", "1b", "1c", "1d")

ORACLE_TOL = 1e-10
ORACLE_MAX_SWEEPS = 200


@dataclass(frozen=True)
class Bus:
    id: int
    is_substation: bool = False
    scheduled_p: float = 0.0
    scheduled_q: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    impedance: complex
    zero_impedance: bool = False

    @property
    def r(self) -> float:
        return self.impedance.real

    @property
    def x(self) -> float:
        return self.impedance.imag


@dataclass(frozen=True, eq=False)
class GridNetwork:
    """Radial feeder with branches oriented away from the substation.

    Use :func:`make_network` (or :func:`parse_case`) rather than the raw
    constructor; those validate radiality and orient the branches.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 1.0

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @cached_property
    def substation(self) -> Bus:
        return next(b for b in self.buses if b.is_substation)

    @cached_property
    def bus_position(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def branch_position(self) -> dict[int, int]:
        return {br.id: k for k, br in enumerate(self.branches)}

    @cached_property
    def parent_branch(self) -> dict[int, Branch]:
        """to^-1: bus id -> the unique branch pointing at it."""
        return {br.to_bus: br for br in self.branches}

    @cached_property
    def child_branches(self) -> dict[int, tuple[Branch, ...]]:
        """fr^-1: bus id -> branches leaving it."""
        out: dict[int, list[Branch]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            out[br.from_bus].append(br)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def sweep_order(self) -> tuple[Branch, ...]:
        """Branches in breadth-first order from the substation."""
        order = []
        queue = deque([self.substation.id])
        while queue:
            b = queue.popleft()
            for br in self.child_branches[b]:
                order.append(br)
                queue.append(br.to_bus)
        return tuple(order)

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_position[bus_id]]

    def branch(self, branch_id: int) -> Branch:
        return self.branches[self.branch_position[branch_id]]

    def scheduled_injections(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.array([b.scheduled_p for b in self.buses], dtype=float)
        q = np.array([b.scheduled_q for b in self.buses], dtype=float)
        return p, q


def make_network(buses: Iterable[Bus], branches: Iterable[Branch], base_mva: float = 1.0) -> GridNetwork:
    """Validate and normalize a bus/branch list into a :class:`GridNetwork`.

    Branches are re-oriented away from the substation; buses and branches are
    sorted by id.
    """
    buses = sorted(buses, key=lambda b: b.id)
    branches = sorted(branches, key=lambda br: br.id)
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise TopologyError("duplicate bus ids")
    if ids != list(range(1, len(ids) + 1)):
        raise TopologyError("bus ids must be contiguous 1..n")
    if len({br.id for br in branches}) != len(branches):
        raise TopologyError("duplicate branch ids")
    subs = [b.id for b in buses if b.is_substation]
    if len(subs) != 1:
        raise TopologyError(f"expected exactly one substation, found {len(subs)}")
    known = set(ids)
    for br in branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise TopologyError(f"branch {br.id} references an unknown bus")
        if br.from_bus == br.to_bus:
            raise RadialityError(f"branch {br.id} is a self-loop")
        if abs(br.impedance) == 0 and not br.zero_impedance:
            raise TopologyError(f"branch {br.id} has zero impedance but is not flagged as a splitting edge")
    if len(branches) != len(buses) - 1:
        raise RadialityError(f"{len(branches)} branches for {len(buses)} buses; a radial feeder needs |B|-1")

    adj: dict[int, list[Branch]] = {b: [] for b in ids}
    for br in branches:
        adj[br.from_bus].append(br)
        adj[br.to_bus].append(br)
    oriented = {}
    seen = {subs[0]}
    queue = deque([subs[0]])
    while queue:
        b = queue.popleft()
        for br in adj[b]:
            if br.id in oriented:
                continue
            other = br.to_bus if br.from_bus == b else br.from_bus
            if other in seen:
                raise RadialityError(f"branch {br.id} closes a cycle")
            seen.add(other)
            queue.append(other)
            oriented[br.id] = br if br.from_bus == b else Branch(
                br.id, b, other, br.impedance, br.zero_impedance)
    if len(seen) != len(buses):
        raise RadialityError("branch graph is not connected")
    return GridNetwork(tuple(buses), tuple(oriented[br.id] for br in branches), float(base_mva))


# ---------------------------------------------------------------- parsing

_MPC_SCALAR = re.compile(r"^mpc\.(\w+)\s*=\s*([^\[;]+);?$")
_MPC_MATRIX = re.compile(r"^mpc\.(\w+)\s*=\s*\[(.*)$")


def _matpower_rows(text: str):
    """Yield (block name, line number, float row) for every matrix row."""
    block = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if block is None:
            m = _MPC_MATRIX.match(line)
            if m:
                block = m.group(1)
                line = m.group(2).strip()
            else:
                m = _MPC_SCALAR.match(line)
                if m:
                    yield m.group(1), lineno, m.group(2).strip().strip("'\"")
                continue
        end = "]" in line
        line = line.split("]", 1)[0]
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if chunk:
                try:
                    yield block, lineno, [float(v) for v in chunk.replace(",", " ").split()]
                except ValueError:
                    raise ParseError(f"non-numeric entry in mpc.{block}", lineno) from None
        if end:
            block = None
    if block is not None:
        raise ParseError(f"unterminated matrix mpc.{block}")


def _parse_matpower(text: str) -> GridNetwork:
    base_mva = None
    bus_rows, branch_rows = [], []
    for name, lineno, row in _matpower_rows(text):
        if isinstance(row, str):
            if name == "baseMVA":
                try:
                    base_mva = float(row)
                except ValueError:
                    raise ParseError("baseMVA is not a number", lineno) from None
            continue
        if name == "bus":
            if len(row) < 4:
                raise ParseError("bus row needs at least 4 columns", lineno)
            bus_rows.append((lineno, row))
        elif name == "branch":
            if len(row) < 4:
                raise ParseError("branch row needs at least 4 columns", lineno)
            branch_rows.append((lineno, row))
    if base_mva is None:
        raise ParseError("missing mpc.baseMVA")
    if not bus_rows or not branch_rows:
        raise ParseError("missing mpc.bus or mpc.branch")
    buses = []
    for lineno, row in bus_rows:
        if row[0] != int(row[0]):
            raise ParseError("bus id must be an integer", lineno)
        buses.append(Bus(int(row[0]), int(row[1]) == 3, -row[2] / base_mva, -row[3] / base_mva))
    branches = [
        Branch(k, int(row[0]), int(row[1]), complex(row[2], row[3]))
        for k, (lineno, row) in enumerate(branch_rows, 1)
    ]
    return make_network(buses, branches, base_mva)


def _parse_bool(token: str, lineno: int) -> bool:
    t = token.lower()
    if t in ("1", "true", "yes", "y"):
        return True
    if t in ("0", "false", "no", "n"):
        return False
    raise ParseError(f"expected a boolean, got {token!r}", lineno)


def _parse_native(text: str) -> GridNetwork:
    section = None
    base_mva = 1.0
    buses, branches = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]").strip().lower()
            if section not in ("buses", "branches"):
                raise ParseError(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            key, sep, value = line.partition("=")
            if sep and key.strip() == "base_mva":
                try:
                    base_mva = float(value)
                except ValueError:
                    raise ParseError("base_mva is not a number", lineno) from None
                continue
            raise ParseError("data outside of a section", lineno)
        tok = line.replace(",", " ").split()
        try:
            if section == "buses":
                if len(tok) != 4:
                    raise ParseError("bus rows are: id is_substation p_sched q_sched", lineno)
                buses.append(Bus(int(tok[0]), _parse_bool(tok[1], lineno), float(tok[2]), float(tok[3])))
            else:
                if len(tok) not in (5, 6):
                    raise ParseError("branch rows are: id from to r x [zero_impedance]", lineno)
                flag = _parse_bool(tok[5], lineno) if len(tok) == 6 else False
                branches.append(Branch(int(tok[0]), int(tok[1]), int(tok[2]),
                                       complex(float(tok[3]), float(tok[4])), flag))
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), lineno) from None
    if not buses:
        raise ParseError("no [buses] rows")
    return make_network(buses, branches, base_mva)


def parse_case(text: str) -> GridNetwork:
    """Parse MATPOWER-subset or native case text into a validated network.

    The format is detected from content: any ``mpc.`` assignment selects the
    MATPOWER reader. Only ``baseMVA`` and the first four columns of ``bus``
    (id, type, Pd, Qd) and ``branch`` (from, to, r, x) are read; bus type 3 is
    the substation and demands become negative per-unit injections.
    """
    if re.search(r"^\s*mpc\.", text, re.M):
        return _parse_matpower(text)
    return _parse_native(text)


def load_case(path) -> GridNetwork:
    with open(path) as fh:
        return parse_case(fh.read())


def format_native(net: GridNetwork) -> str:
    """Serialize a network in the native line-oriented format."""
    lines = [f"base_mva = {net.base_mva!r}", "[buses]"]
    for b in net.buses:
        lines.append(f"{b.id} {int(b.is_substation)} {b.scheduled_p!r} {b.scheduled_q!r}")
    lines.append("[branches]")
    for br in net.branches:
        row = f"{br.id} {br.from_bus} {br.to_bus} {br.r!r} {br.x!r}"
        if br.zero_impedance:
            row += " 1"
        lines.append(row)
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ power flow

@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Nonlinear DistFlow solution; arrays follow bus / branch id order."""

    p: np.ndarray
    q: np.ndarray
    v2: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    c2: np.ndarray
    xp: np.ndarray
    iterations: int = 0
    max_mismatch: float = 0.0

    def vector(self) -> np.ndarray:
        """Stack into the global system vector (p,q,v2 per bus | P,Q,c2,x' per branch)."""
        bus_part = np.column_stack([self.p, self.q, self.v2]).ravel()
        br_part = np.column_stack([self.P, self.Q, self.c2, self.xp]).ravel()
        return np.concatenate([bus_part, br_part])


def distflow_residuals(net: GridNetwork, sol: PowerFlowSolution) -> dict[str, float]:
    """Max absolute residual of each nonlinear branch equation family.

    The quadratic relation is checked in the multiplied form
    ``v2_fr * c2 - (P^2 + Q^2)`` so that unloaded branches (c2 = 0) are fine.
    """
    pos = net.bus_position
    r = np.array([br.r for br in net.branches])
    x = np.array([br.x for br in net.branches])
    fr = np.array([pos[br.from_bus] for br in net.branches], dtype=int)
    to = np.array([pos[br.to_bus] for br in net.branches], dtype=int)
    child_P = np.zeros(net.n_buses)
    child_Q = np.zeros(net.n_buses)
    np.add.at(child_P, fr, sol.P)
    np.add.at(child_Q, fr, sol.Q)
    res_a = sol.p[to] - (sol.P - child_P[to] - r * sol.c2)
    res_b = sol.q[to] - (sol.Q - child_Q[to] - x * sol.c2)
    res_c = sol.v2[fr] - (sol.v2[to] + 2 * (r * sol.P + x * sol.Q) - (r**2 + x**2) * sol.c2)
    res_d = sol.v2[fr] * sol.c2 - (sol.P**2 + sol.Q**2)
    return {f: float(np.max(np.abs(v), initial=0.0))
            for f, v in zip(FAMILIES, (res_a, res_b, res_c, res_d))}


def solve_power_flow(net: GridNetwork, p=None, q=None, *, tol: float = ORACLE_TOL,
                     max_sweeps: int = ORACLE_MAX_SWEEPS) -> PowerFlowSolution:
    """Backward/forward sweep on the DistFlow branch equations.

    Parameters
    ----------
    net : GridNetwork
    p, q : array_like, optional
        Per-bus injections in bus order. Default to the scheduled values.
        The substation entry is ignored; its injection is set to balance the
        flows leaving it.
    tol : float
        Stop when the largest branch-equation residual drops below this.
    max_sweeps : int

    Returns
    -------
    PowerFlowSolution

    Raises
    ------
    OracleDivergenceError
        No convergence within ``max_sweeps`` or a non-physical iterate.
    """
    sp_, sq_ = net.scheduled_injections()
    p = sp_ if p is None else np.asarray(p, dtype=float).copy()
    q = sq_ if q is None else np.asarray(q, dtype=float).copy()
    if p.shape != (net.n_buses,) or q.shape != (net.n_buses,):
        raise DimensionError(f"injections must have shape ({net.n_buses},)")
    pos = net.bus_position
    bpos = net.branch_position
    order = [(bpos[br.id], pos[br.from_bus], pos[br.to_bus], br.r, br.x) for br in net.sweep_order]
    nl = net.n_branches
    P = np.zeros(nl)
    Q = np.zeros(nl)
    c2 = np.zeros(nl)
    v2 = np.ones(net.n_buses)
    root = pos[net.substation.id]

    fr = np.array([pos[br.from_bus] for br in net.branches], dtype=int)
    mismatch = np.inf
    for sweep in range(1, max_sweeps + 1):
        acc_P = np.zeros(net.n_buses)
        acc_Q = np.zeros(net.n_buses)
        for k, f, t, r, x in reversed(order):
            P[k] = p[t] + acc_P[t] + r * c2[k]
            Q[k] = q[t] + acc_Q[t] + x * c2[k]
            acc_P[f] += P[k]
            acc_Q[f] += Q[k]
        p[root] = -acc_P[root]
        q[root] = -acc_Q[root]
        # the stopping test is the residual of exactly the state returned
        sol = _solution(P, Q, c2, v2, p, q, fr, sweep)
        # x' must also match v2_fr in quotient form, or small currents amplify the error in H x
        quotient = np.max(np.abs(sol.xp - sol.v2[fr]), initial=0.0)
        mismatch = max(max(distflow_residuals(net, sol).values()), quotient)
        if mismatch < tol:
            return replace(sol, max_mismatch=mismatch)
        for k, f, t, r, x in order:
            c2[k] = (P[k] ** 2 + Q[k] ** 2) / v2[f]
            v2[t] = v2[f] - 2 * (r * P[k] + x * Q[k]) + (r * r + x * x) * c2[k]
            if not v2[t] > 0:
                raise OracleDivergenceError(f"non-positive squared voltage at sweep {sweep}")
        if not np.all(np.isfinite(c2)):
            raise OracleDivergenceError(f"non-finite branch current at sweep {sweep}")
    raise OracleDivergenceError(f"no convergence after {max_sweeps} sweeps (mismatch {mismatch:.3e})")


def _solution(P, Q, c2, v2, p, q, fr, sweeps) -> PowerFlowSolution:
    # x' = |S|^2 / c2, or v2 of the sending bus on an unloaded branch (both satisfy the surrogate row)
    loaded = c2 > 0
    xp = v2[fr].copy()
    xp[loaded] = (P[loaded] ** 2 + Q[loaded] ** 2) / c2[loaded]
    return PowerFlowSolution(p.copy(), q.copy(), v2.copy(), P.copy(), Q.copy(), c2.copy(), xp,
                             iterations=sweeps)


# ------------------------------------------------------- variable space

@dataclass(frozen=True, eq=False)
class VariableSpace:
    """Global indexing of bus and branch variables plus the measured mask.

    Index layout: ``3 * bus_pos + kind`` for bus kinds (p, q, v2), then
    ``3 * n_buses + 4 * branch_pos + kind`` for branch kinds (P, Q, c2, x').
    """

    bus_ids: tuple[int, ...]
    branch_ids: tuple[int, ...]
    branch_ends: tuple[tuple[int, int], ...]
    measured: np.ndarray = field(repr=False)

    @property
    def n_buses(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branches(self) -> int:
        return len(self.branch_ids)

    @property
    def m(self) -> int:
        return 3 * self.n_buses + 4 * self.n_branches

    @cached_property
    def _bus_pos(self) -> dict[int, int]:
        return {b: k for k, b in enumerate(self.bus_ids)}

    @cached_property
    def _branch_pos(self) -> dict[int, int]:
        return {b: k for k, b in enumerate(self.branch_ids)}

    def bus_var(self, bus_id: int, kind: str) -> int:
        try:
            return 3 * self._bus_pos[bus_id] + BUS_KINDS.index(kind)
        except (KeyError, ValueError):
            raise VariableIndexError(f"no bus variable {kind}_{bus_id}") from None

    def branch_var(self, branch_id: int, kind: str) -> int:
        try:
            return 3 * self.n_buses + 4 * self._branch_pos[branch_id] + BRANCH_KINDS.index(kind)
        except (KeyError, ValueError):
            raise VariableIndexError(f"no branch variable {kind} on branch {branch_id}") from None

    def bus_vars(self, bus_id: int) -> list[int]:
        return [self.bus_var(bus_id, k) for k in BUS_KINDS]

    def branch_vars(self, branch_id: int) -> list[int]:
        return [self.branch_var(branch_id, k) for k in BRANCH_KINDS]

    @cached_property
    def names(self) -> tuple[str, ...]:
        out = [f"{k}_{b}" for b in self.bus_ids for k in BUS_KINDS]
        out += [f"{k}_{f}-{t}" for (f, t) in self.branch_ends for k in BRANCH_KINDS]
        return tuple(out)

    @cached_property
    def _name_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def index_of(self, ref) -> int:
        """Resolve a variable name (``"p_42"``, ``"P_41-42"``) or integer index."""
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < self.m:
                raise VariableIndexError(f"variable index {ref} out of range 0..{self.m - 1}")
            return int(ref)
        try:
            return self._name_index[ref]
        except KeyError:
            raise VariableIndexError(f"unknown variable {ref!r}") from None

    @cached_property
    def measured_indices(self) -> np.ndarray:
        return np.flatnonzero(self.measured)

    @cached_property
    def p_index(self) -> np.ndarray:
        """Global index of p_b for every bus in bus order."""
        return np.arange(self.n_buses) * 3

    def is_bus_var(self, idx: int) -> bool:
        return idx < 3 * self.n_buses

    def bus_of(self, idx: int) -> int:
        return self.bus_ids[idx // 3]


def build_variable_space(net: GridNetwork, measured="all") -> VariableSpace:
    """Index the system variables and mark which ones are measured.

    ``measured`` is ``"all"``, ``"injections"`` (every bus variable p, q, v2)
    or an explicit sequence of variable names / integer indices.
    """
    space = VariableSpace(
        tuple(b.id for b in net.buses),
        tuple(br.id for br in net.branches),
        tuple((br.from_bus, br.to_bus) for br in net.branches),
        np.zeros(0, dtype=bool),
    )
    mask = np.zeros(space.m, dtype=bool)
    if isinstance(measured, str):
        if measured == "all":
            mask[:] = True
        elif measured in ("injections", "injections-only"):
            mask[: 3 * net.n_buses] = True
        else:
            raise ValueError(f"unknown measurement policy {measured!r}")
    else:
        for ref in measured:
            mask[space.index_of(ref)] = True
    object.__setattr__(space, "measured", mask)
    mask.setflags(write=False)
    return space


# ----------------------------------------------------------- constraints

@dataclass(frozen=True, eq=False)
class ConstraintMatrix:
    """Sparse linear DistFlow rows with their provenance."""

    H: sp.csr_matrix
    families: tuple[str, ...]
    row_branch: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.H.shape

    def rows_of(self, family: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.families) == family)


def assemble_constraints(net: GridNetwork, space: VariableSpace) -> ConstraintMatrix:
    """Build H with four rows per branch, in branch id order.

    Row families: real and reactive balance at the receiving bus, voltage
    drop, and the linear surrogate ``v2_fr - x'_l = 0`` for the quadratic
    current relation.
    """
    rows, cols, vals = [], [], []
    families, row_branch = [], []

    def put(row, col, val):
        rows.append(row)
        cols.append(col)
        vals.append(val)

    row = 0
    for br in net.branches:
        to, fr = br.to_bus, br.from_bus
        r, x = br.r, br.x
        kids = net.child_branches[to]
        P, Q = space.branch_var(br.id, "P"), space.branch_var(br.id, "Q")
        c2, xp = space.branch_var(br.id, "c2"), space.branch_var(br.id, "xp")

        put(row, space.bus_var(to, "p"), 1.0)
        put(row, P, -1.0)
        for kid in kids:
            put(row, space.branch_var(kid.id, "P"), 1.0)
        put(row, c2, r)

        put(row + 1, space.bus_var(to, "q"), 1.0)
        put(row + 1, Q, -1.0)
        for kid in kids:
            put(row + 1, space.branch_var(kid.id, "Q"), 1.0)
        put(row + 1, c2, x)

        put(row + 2, space.bus_var(fr, "v2"), 1.0)
        put(row + 2, space.bus_var(to, "v2"), -1.0)
        put(row + 2, P, -2.0 * r)
        put(row + 2, Q, -2.0 * x)
        put(row + 2, c2, r * r + x * x)

        put(row + 3, space.bus_var(fr, "v2"), 1.0)
        put(row + 3, xp, -1.0)

        families += list(FAMILIES)
        row_branch += [br.id] * 4
        row += 4

    H = sp.csr_matrix((vals, (rows, cols)), shape=(row, space.m))
    H.eliminate_zeros()
    return ConstraintMatrix(H, tuple(families), np.asarray(row_branch, dtype=int))


def evaluate_residual(constraints, x) -> np.ndarray:
    """Return ``H @ x`` (the relaxed constraint function)."""
    H = constraints.H if isinstance(constraints, ConstraintMatrix) else constraints
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != H.shape[1]:
        raise DimensionError(f"x has shape {x.shape}, expected ({H.shape[1]},)")
    return np.asarray(H @ x).ravel()

