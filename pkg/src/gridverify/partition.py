"""Aggregator regions, communication graph and per-region operators."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .exceptions import ParseError, PartitionError
from .grid import ConstraintMatrix, GridNetwork, VariableSpace, assemble_constraints


@dataclass(frozen=True)
class RegionAssignment:
    n_regions: int
    mapping: Mapping[int, int]

    def buses_of(self, region: int) -> tuple[int, ...]:
        return tuple(sorted(b for b, r in self.mapping.items() if r == region))

    @property
    def regions(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_regions + 1))


def parse_region_map(text: str) -> dict[int, int]:
    """Read ``bus_id region_id`` pairs; ``#`` starts a comment."""
    out: dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.replace(",", " ").split()
        if len(tok) != 2:
            raise ParseError("expected 'bus_id region_id'", lineno)
        try:
            bus, region = int(tok[0]), int(tok[1])
        except ValueError:
            raise ParseError("bus and region ids must be integers", lineno) from None
        if bus in out:
            raise ParseError(f"bus {bus} assigned twice", lineno)
        out[bus] = region
    return out


def load_region_map(path) -> dict[int, int]:
    with open(path) as fh:
        return parse_region_map(fh.read())


def assign_regions(net: GridNetwork, mapping: Mapping[int, int]) -> RegionAssignment:
    """Validate a bus -> region map: full coverage, ids 1..N, no empty region."""
    bus_ids = {b.id for b in net.buses}
    missing = sorted(bus_ids - set(mapping))
    if missing:
        raise PartitionError(f"buses without a region: {missing[:10]}")
    extra = sorted(set(mapping) - bus_ids)
    if extra:
        raise PartitionError(f"mapping references unknown buses: {extra[:10]}")
    regions = set(mapping.values())
    if min(regions) < 1:
        raise PartitionError("region ids start at 1")
    n = max(regions)
    empty = sorted(set(range(1, n + 1)) - regions)
    if empty:
        raise PartitionError(f"empty regions: {empty}")
    return RegionAssignment(n, dict(mapping))


# --------------------------------------------------------------- graph

@dataclass(frozen=True)
class CommunicationGraph:
    """Simple undirected graph over region ids."""

    nodes: tuple[int, ...]
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_edges(cls, nodes, edges) -> "CommunicationGraph":
        norm = set()
        for i, j in edges:
            if i == j:
                raise PartitionError(f"self-loop on region {i}")
            norm.add((min(i, j), max(i, j)))
        return cls(tuple(sorted(nodes)), frozenset(norm))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(sorted({b if a == i else a for a, b in self.edges if i in (a, b)}))

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def directed_edges(self) -> list[tuple[int, int]]:
        return sorted([(i, j) for i, j in self.edges] + [(j, i) for i, j in self.edges])

    def without(self, r: int) -> "CommunicationGraph":
        return CommunicationGraph(tuple(n for n in self.nodes if n != r),
                                  frozenset(e for e in self.edges if r not in e))

    def subgraph(self, nodes) -> "CommunicationGraph":
        keep = set(nodes)
        return CommunicationGraph(tuple(n for n in self.nodes if n in keep),
                                  frozenset(e for e in self.edges if e[0] in keep and e[1] in keep))

    def components(self) -> list[tuple[int, ...]]:
        """Connected components, each sorted, ordered by smallest member."""
        adj = {n: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        seen: set[int] = set()
        out = []
        for start in self.nodes:
            if start in seen:
                continue
            comp = []
            queue = deque([start])
            seen.add(start)
            while queue:
                n = queue.popleft()
                comp.append(n)
                for m in adj[n]:
                    if m not in seen:
                        seen.add(m)
                        queue.append(m)
            out.append(tuple(sorted(comp)))
        return out

    def is_connected(self) -> bool:
        return len(self.components()) <= 1


def is_cut_vertex(graph: CommunicationGraph, r: int) -> bool:
    """True iff deleting ``r`` (and its edges) increases the component count."""
    if r not in graph.nodes:
        raise PartitionError(f"region {r} is not in the graph")
    before = len(graph.components())
    after = len(graph.without(r).components())
    return after > before


# --------------------------------------------------------- region views

@dataclass(frozen=True, eq=False)
class RegionView:
    """Everything one aggregator needs to run its local updates.

    ``local`` lists the global indices of the region's variable copies in
    ascending order; all other index arrays are positions into ``local``.
    """

    region: int
    buses: tuple[int, ...]
    local: np.ndarray
    measured_local: np.ndarray
    p_local: np.ndarray
    p_buses: tuple[int, ...]
    H: np.ndarray
    H_rows: np.ndarray
    shared: Mapping[int, np.ndarray] = field(repr=False)
    shared_global: Mapping[int, np.ndarray] = field(repr=False)
    D: np.ndarray = field(repr=False)
    Dbar: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.local)

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(sorted(self.shared))

    @property
    def shared_support(self) -> np.ndarray:
        """Local positions held in common with at least one neighbor."""
        return np.flatnonzero(self.D > 0)

    def position_of(self, global_index: int) -> int:
        k = int(np.searchsorted(self.local, global_index))
        if k >= len(self.local) or self.local[k] != global_index:
            raise KeyError(global_index)
        return k

    def select(self, x_global: np.ndarray) -> np.ndarray:
        """S^(i) x: this region's copy of a global vector (last axis)."""
        return np.asarray(x_global)[..., self.local]


def _degree(m: int, shared: Mapping[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    D = np.zeros(m)
    for pos in shared.values():
        D[pos] += 1.0
    Dbar = np.zeros(m)
    nz = D > 0
    Dbar[nz] = 1.0 / D[nz]
    return D, Dbar


def region_variables(net: GridNetwork, space: VariableSpace, buses) -> np.ndarray:
    """Global indices held by a region that owns ``buses``.

    Owned buses, every branch touching an owned bus, and the bus variables of
    the far end of each such tie-line.
    """
    own = set(buses)
    idx: set[int] = set()
    for b in own:
        idx.update(space.bus_vars(b))
    for br in net.branches:
        if br.from_bus in own or br.to_bus in own:
            idx.update(space.branch_vars(br.id))
            idx.update(space.bus_vars(br.from_bus))
            idx.update(space.bus_vars(br.to_bus))
    return np.array(sorted(idx), dtype=int)


def build_region_views(net: GridNetwork, space: VariableSpace, assignment: RegionAssignment,
                       constraints: ConstraintMatrix | None = None
                       ) -> tuple[dict[int, RegionView], CommunicationGraph]:
    """Construct every region's operators and the communication graph.

    Returns
    -------
    views : dict
        Region id -> :class:`RegionView`.
    graph : CommunicationGraph
        Edge (i, j) iff the two regions hold at least one common variable.
    """
    if constraints is None:
        constraints = assemble_constraints(net, space)
    H = constraints.H.tocsr()
    sub = net.substation.id
    locals_ = {r: region_variables(net, space, assignment.buses_of(r)) for r in assignment.regions}

    shared_global: dict[int, dict[int, np.ndarray]] = {r: {} for r in assignment.regions}
    edges = []
    regions = assignment.regions
    for a_pos, i in enumerate(regions):
        for j in regions[a_pos + 1:]:
            common = np.intersect1d(locals_[i], locals_[j], assume_unique=True)
            if common.size:
                shared_global[i][j] = common
                shared_global[j][i] = common
                edges.append((i, j))
    graph = CommunicationGraph.from_edges(regions, edges)

    views = {}
    for r in regions:
        local = locals_[r]
        member = np.zeros(space.m, dtype=bool)
        member[local] = True
        rows = [row for row in range(H.shape[0])
                if member[H.indices[H.indptr[row]:H.indptr[row + 1]]].all()]
        rows = np.array(rows, dtype=int)
        H_local = H[rows][:, local].toarray() if rows.size else np.zeros((0, local.size))
        measured_local = np.flatnonzero(space.measured[local])
        buses = assignment.buses_of(r)
        p_buses = tuple(b for b in buses if b != sub)
        p_local = np.searchsorted(local, [space.bus_var(b, "p") for b in p_buses]).astype(int)
        shared = {j: np.searchsorted(local, g).astype(int) for j, g in shared_global[r].items()}
        D, Dbar = _degree(local.size, shared)
        views[r] = RegionView(r, buses, local, measured_local, p_local, p_buses, H_local, rows,
                              shared, dict(shared_global[r]), D, Dbar)
    return views, graph


def remove_region(views: Mapping[int, RegionView], graph: CommunicationGraph, r: int
                  ) -> tuple[dict[int, RegionView], CommunicationGraph, list[tuple[int, ...]]]:
    """Isolate region ``r``: drop it, its edges and its share in every D.

    Local variable lists of the survivors are unchanged; copies that were
    shared only with ``r`` simply become private.

    Returns the surviving views, the reduced graph and its connected
    components.
    """
    if r not in views:
        raise PartitionError(f"region {r} does not exist")
    if len(views) == 1:
        raise PartitionError("cannot remove the last region")
    out = {}
    for i, v in views.items():
        if i == r:
            continue
        if r in v.shared:
            shared = {j: s for j, s in v.shared.items() if j != r}
            shared_g = {j: s for j, s in v.shared_global.items() if j != r}
            D, Dbar = _degree(v.m, shared)
            v = replace(v, shared=shared, shared_global=shared_g, D=D, Dbar=Dbar)
        out[i] = v
    g = graph.without(r)
    return out, g, g.components()


def restrict_views(views: Mapping[int, RegionView], regions) -> dict[int, RegionView]:
    """Views for a subset of regions that is closed under communication."""
    keep = set(regions)
    for i in keep:
        stray = set(views[i].shared) - keep
        if stray:
            raise PartitionError(f"region {i} still shares variables with {sorted(stray)}")
    return {i: views[i] for i in sorted(keep)}


def stitch(views: Mapping[int, RegionView], local_vectors: Mapping[int, np.ndarray], m: int) -> np.ndarray:
    """Average every region's copy back into a global vector.

    The average is taken as a reference copy plus the mean deviation from
    it, so copies that agree reproduce the shared value bit for bit.
    Variables held by no region come back as NaN. Works on a trailing axis,
    so ``(T, m_i)`` inputs give a ``(T, m)`` output.
    """
    first = next(iter(local_vectors.values()))
    lead = np.shape(first)[:-1]
    ref = np.full(lead + (m,), np.nan)
    for i, x in local_vectors.items():
        L = views[i].local
        unset = np.isnan(ref[..., L])
        ref[..., L] = np.where(unset, x, ref[..., L])
    dev = np.zeros(lead + (m,))
    count = np.zeros(m)
    for i, x in local_vectors.items():
        L = views[i].local
        dev[..., L] += x - ref[..., L]
        count[L] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        out = ref + dev / count
    out[..., count == 0] = np.nan
    return out
