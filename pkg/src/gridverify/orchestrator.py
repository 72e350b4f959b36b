"""End-to-end verification runs: scenario files, round loop, isolation, reports.

A run is a sequence of phases. Each phase runs consensus ADMM and the
trust-score detector over one connected group of regions, with every
inter-region message passing through a fresh :class:`~gridverify.ledger.LedgerSet`.
A phase ends when the states settle, when the detector names an attacker,
or when the iteration budget runs out. An accused region is cut off and
every remaining connected group restarts from scratch.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .admm import (
    AdmmConfig,
    extract_shared,
    initial_point,
    initialize,
    neighbor_average,
    psi_update,
    seed_duals,
    solve_centralized,
    upsilon_update,
    x_update,
)
from .adversary import (
    NO_ATTACK,
    AttackSpec,
    attack_vector,
    craft_stealth_attack,
    perturb_measurements,
    perturb_outgoing_state,
    stealth_feasibility,
)
from .detection import INCONCLUSIVE, DetectionConfig, TrustState, Verdict, harmonic_alpha
from .exceptions import DimensionError, ParseError
from .grid import assemble_constraints, build_variable_space, load_case, solve_power_flow
from .ledger import HASH_NAME, SYSTEM, LedgerSet
from .partition import (
    CommunicationGraph,
    assign_regions,
    build_region_views,
    load_region_map,
    remove_region,
    restrict_views,
    stitch,
)

DATA_DIR = Path(__file__).parent / "data"
BUILTIN_PREFIX = "builtin:"

EXIT_CONVERGED = 0
EXIT_USAGE = 1
EXIT_ISOLATED = 2
EXIT_EXHAUSTED = 3


# ----------------------------------------------------------------- config

@dataclass(frozen=True)
class ConstantAlpha:
    value: float

    def __call__(self, k: int) -> float:
        return self.value


def _alpha_from(spec):
    if spec in (None, "harmonic", "1/k"):
        return harmonic_alpha
    return ConstantAlpha(float(spec))


def _alpha_to(alpha):
    return alpha.value if isinstance(alpha, ConstantAlpha) else "harmonic"


def resolve_path(ref: str, base_dir: Path) -> Path:
    """``builtin:name`` points into the package data; other paths are relative to ``base_dir``."""
    if ref.startswith(BUILTIN_PREFIX):
        name = ref[len(BUILTIN_PREFIX):]
        for sub, ext in (("cases", ".m"), ("cases", ".case"), ("regions", ".txt")):
            p = DATA_DIR / sub / (name + ext)
            if p.exists():
                return p
        raise FileNotFoundError(f"no packaged file named {name!r}")
    p = Path(ref)
    return p if p.is_absolute() else (base_dir / p)


@dataclass(frozen=True)
class ScenarioConfig:
    """Every knob of one verification run.

    ``case`` and ``regions`` are file references resolved against
    ``base_dir`` (the scenario file's directory); ``builtin:<name>`` selects a
    file shipped with the package. ``regions=None`` puts every bus in region 1.
    """

    case: str
    regions: str | None = None
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    measurement_policy: Any = "all"
    noise_variance: float = 1e-4
    noise_seed: int = 0
    attack: AttackSpec = NO_ATTACK
    schedule_override: Mapping[int, float] | None = None
    truth_deviation: Mapping[int, float] | None = None
    max_restarts: int | None = None
    output_dir: str | None = None
    use_ledger: bool = True
    literal_or_termination: bool = False
    warm_start: bool = False
    base_dir: str = "."

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        if self.max_restarts is not None and self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")

    @property
    def case_path(self) -> Path:
        return resolve_path(self.case, Path(self.base_dir))

    @property
    def regions_path(self) -> Path | None:
        return None if self.regions is None else resolve_path(self.regions, Path(self.base_dir))

    def replace(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: Mapping, base_dir=".") -> "ScenarioConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ParseError(f"unknown scenario fields: {sorted(unknown)}")
        if "case" not in d:
            raise ParseError("scenario needs a 'case' entry")
        admm = dict(d.pop("admm", {}) or {})
        det = dict(d.pop("detection", {}) or {})
        att = dict(d.pop("attack", {}) or {})
        try:
            if "horizon" in admm:
                admm["horizon"] = tuple(admm["horizon"])
            admm_cfg = AdmmConfig(**admm)
            if "alpha" in det:
                det["alpha"] = _alpha_from(det["alpha"])
            if isinstance(det.get("beta"), Mapping):
                det["beta"] = {int(k): float(v) for k, v in det["beta"].items()}
            det_cfg = DetectionConfig(**det)
            if "perturbations" in att:
                att["perturbations"] = tuple(tuple(p) for p in att["perturbations"])
            attack = AttackSpec(**att) if att else NO_ATTACK
        except TypeError as exc:
            raise ParseError(f"bad scenario section: {exc}") from None
        for key in ("schedule_override", "truth_deviation"):
            if d.get(key) is not None:
                d[key] = {int(k): float(v) for k, v in d[key].items()}
        d.setdefault("base_dir", str(base_dir))
        return cls(admm=admm_cfg, detection=det_cfg, attack=attack, **d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None
        return cls.from_dict(raw, base_dir=path.resolve().parent)

    def to_dict(self) -> dict:
        admm = asdict(self.admm)
        admm["horizon"] = list(admm["horizon"])
        det = {k: getattr(self.detection, k) for k in self.detection.__dataclass_fields__}
        det["alpha"] = _alpha_to(self.detection.alpha)
        if isinstance(det["beta"], Mapping):
            det["beta"] = {str(k): v for k, v in det["beta"].items()}
        att = asdict(self.attack)
        att["perturbations"] = [list(p) for p in self.attack.perturbations]
        out = {k: getattr(self, k) for k in self.__dataclass_fields__
               if k not in ("admm", "detection", "attack")}
        for key in ("schedule_override", "truth_deviation"):
            if out[key] is not None:
                out[key] = {str(k): v for k, v in out[key].items()}
        if not isinstance(out["measurement_policy"], str):
            out["measurement_policy"] = list(out["measurement_policy"])
        out.update(admm=admm, detection=det, attack=att)
        return out


# ------------------------------------------------------------------- data

@dataclass(frozen=True, eq=False)
class ScenarioData:
    """Ground truth (kept for reporting only), sensor readings and schedule.

    Arrays are ``(T, m)`` for states and readings (NaN on unmeasured
    variables) and ``(T, n_buses)`` for the schedule.
    """

    truth: np.ndarray
    measurements: np.ndarray
    schedule: np.ndarray


@dataclass(eq=False)
class PreparedScenario:
    """Parsed case, operators and generated data, reusable across attack settings."""

    config: ScenarioConfig
    net: Any
    space: Any
    constraints: Any
    assignment: Any
    views: dict
    graph: CommunicationGraph
    data: ScenarioData

    @property
    def regions(self) -> tuple[int, ...]:
        return self.graph.nodes


def generate_scenario_data(config: ScenarioConfig, net=None, space=None) -> ScenarioData:
    """Power-flow ground truth on the schedule (plus any deviation) and noisy readings.

    Raises
    ------
    OracleDivergenceError
        The requested injections have no power-flow solution.
    """
    net = net if net is not None else load_case(config.case_path)
    space = space if space is not None else build_variable_space(net, config.measurement_policy)
    p_sched, q_sched = net.scheduled_injections()
    pos = net.bus_position
    if config.schedule_override:
        p_sched = p_sched.copy()
        for bus, val in config.schedule_override.items():
            p_sched[pos[bus]] = val
    p_true = p_sched.copy()
    for bus, val in (config.truth_deviation or {}).items():
        p_true[pos[bus]] += val
    x = solve_power_flow(net, p_true, q_sched).vector()
    T = config.admm.n_times
    truth = np.tile(x, (T, 1))
    rng = np.random.default_rng(config.noise_seed)
    noise = rng.standard_normal(truth.shape) * math.sqrt(config.noise_variance)
    s = truth + noise
    s[:, ~space.measured] = np.nan
    schedule = np.tile(p_sched, (T, 1))
    return ScenarioData(truth, s, schedule)


def prepare(config: ScenarioConfig, measurements=None) -> PreparedScenario:
    """Load the case and regions and build operators and data for ``config``.

    ``measurements`` (``(T, m)``, NaN where unmeasured) replaces the generated
    readings; the ground truth is then unknown and stored as NaN.
    """
    net = load_case(config.case_path)
    space = build_variable_space(net, config.measurement_policy)
    constraints = assemble_constraints(net, space)
    if config.regions_path is None:
        mapping = {b.id: 1 for b in net.buses}
    else:
        mapping = load_region_map(config.regions_path)
    assignment = assign_regions(net, mapping)
    views, graph = build_region_views(net, space, assignment, constraints)
    if measurements is None:
        data = generate_scenario_data(config, net, space)
    else:
        s = np.array(measurements, dtype=float)
        if s.shape != (config.admm.n_times, space.m):
            raise DimensionError(f"measurements have shape {s.shape}, "
                                 f"expected ({config.admm.n_times}, {space.m})")
        p_sched = net.scheduled_injections()[0].copy()
        for bus, val in (config.schedule_override or {}).items():
            p_sched[net.bus_position[bus]] = val
        data = ScenarioData(np.full_like(s, np.nan), s, np.tile(p_sched, (s.shape[0], 1)))
    return PreparedScenario(config, net, space, constraints, assignment, views, graph, data)


# ---------------------------------------------------------------- results

@dataclass(eq=False)
class PhaseResult:
    """One ADMM + detection run over a fixed group of regions."""

    index: int
    regions: tuple[int, ...]
    status: str  # converged | verdict | exhausted | pi_stable
    iterations: int
    verdict: Verdict
    views: dict = field(repr=False)
    x: dict = field(repr=False)
    pi_history: list = field(default_factory=list, repr=False)
    d: dict = field(default_factory=dict, repr=False)
    displacement: list = field(default_factory=list, repr=False)
    gap: list = field(default_factory=list, repr=False)
    state_gap: list = field(default_factory=list, repr=False)
    traces: dict = field(default_factory=dict, repr=False)
    ledgers: LedgerSet | None = field(default=None, repr=False)
    notes: list = field(default_factory=list)
    fallback_rounds: int = 0
    superseded: bool = False

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final_pi(self) -> np.ndarray | None:
        return self.pi_history[-1] if self.pi_history else None

    def summary(self) -> dict:
        return {
            "index": self.index,
            "regions": list(self.regions),
            "status": self.status,
            "iterations": self.iterations,
            "verdict": str(self.verdict),
            "superseded": self.superseded,
            "final_displacement": self.displacement[-1] if self.displacement else None,
            "final_gap": self.gap[-1] if self.gap else None,
            "final_state_gap": self.state_gap[-1] if self.state_gap else None,
            "pi_history": [p.tolist() for p in self.pi_history],
            "final_pi": None if self.final_pi is None else self.final_pi.tolist(),
            "disagreement": {f"{i}-{j}": v for (i, j), v in sorted(self.d.items())},
            "periodic_fallback_rounds": self.fallback_rounds,
            "notes": list(self.notes),
        }


@dataclass(eq=False)
class RunReport:
    outcome: str  # converged | attacker_isolated | exhausted
    isolated: list
    phases: list
    x: np.ndarray = field(repr=False)
    truth: np.ndarray = field(repr=False)
    schedule: np.ndarray = field(repr=False)
    deviations: list = field(repr=False)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict, repr=False)
    metadata: dict = field(default_factory=dict, repr=False)

    @property
    def exit_code(self) -> int:
        return {"converged": EXIT_CONVERGED, "attacker_isolated": EXIT_ISOLATED}.get(
            self.outcome, EXIT_EXHAUSTED)

    @property
    def final_phases(self) -> list:
        return [p for p in self.phases if not p.superseded]

    @property
    def components(self) -> list:
        return [list(p.regions) for p in self.final_phases]

    @property
    def iterations(self) -> list:
        return [p.iterations for p in self.phases]

    @property
    def pi_history(self) -> list:
        return [p.pi_history for p in self.phases]

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        out = {
            "outcome": self.outcome,
            "exit_code": self.exit_code,
            "isolated": list(self.isolated),
            "components": self.components,
            "iterations": self.iterations,
            "phases": [p.summary() for p in self.phases],
            "deviations": self.deviations,
            "x_final": [[None if math.isnan(v) else v for v in row] for row in self.x.tolist()],
            "config": self.config,
            "metadata": self.metadata,
        }
        if include_wall_clock:
            out["wall_clock"] = self.wall_clock
        return out


# ------------------------------------------------------------- round loop

class _Exchange:
    """Moves shared slices between regions, through the ledger channels when enabled."""

    def __init__(self, views, ledgers: LedgerSet | None, attack: AttackSpec, horizon, phase: int):
        self.views = views
        self.ledgers = ledgers
        self.attack = attack
        self.horizon = horizon
        self.phase = phase
        self.outbox: dict[tuple[int, int], np.ndarray] = {}
        # fixed bias per victim, drawn from the victim's stealth null space
        self.stealth: dict[int, np.ndarray] = {}
        if attack.kind == "stealth" and attack.attacker in views:
            j = attack.attacker
            for i in views[j].neighbors:
                rep = stealth_feasibility(views[i].H, views[i].shared[j])
                crafted = craft_stealth_attack(rep, attack.stealth_magnitude, seed=attack.seed)
                if crafted.feasible:
                    self.stealth[i] = crafted.vector

    def send(self, states, k: int) -> None:
        for i in sorted(states):
            for j in self.views[i].neighbors:
                msg = extract_shared(states[i], j)
                if self.attack.corrupts_messages(i, k) and not self.attack.corrupt_own_state:
                    msg = perturb_outgoing_state(msg, self.attack, k, j, self.horizon)
                if (self.attack.kind == "stealth" and i == self.attack.attacker and j in self.stealth
                        and k >= self.attack.start_iteration):
                    msg = msg + self.stealth[j]
                if self.ledgers is not None:
                    self.ledgers.channel(i, j).append(
                        i, "shared_slice", {"phase": self.phase, "k": k, "to": j, "slice": msg})
                self.outbox[(i, j)] = msg

    def receive(self, i: int, k: int) -> dict[int, np.ndarray]:
        out = {}
        for j in self.views[i].neighbors:
            if self.ledgers is not None:
                entry = self.ledgers.channel(j, i).read_latest("shared_slice", reader=i)
                data = entry.data()
                if data["k"] != k or data["phase"] != self.phase:
                    raise RuntimeError(f"stale message {j}->{i}: round {data['k']}, expected {k}")
                out[j] = data["slice"]
            else:
                out[j] = self.outbox[(j, i)]
        return out


def _record_state(ledgers, states, phase, k):
    if ledgers is None:
        return
    for r in sorted(states):
        st = states[r]
        ledgers.local[r].append(r, "admm_state", {
            "phase": phase, "k": k, "x": st.x, "psi": st.psi, "upsilon": st.upsilon})


def _region_inputs(prep: PreparedScenario, view, attack: AttackSpec):
    s = prep.data.measurements
    g_meas = view.local[view.measured_local]
    s_r = s[:, g_meas]
    if attack.kind == "measurement" and view.region == attack.attacker:
        s_r = perturb_measurements(s_r, attack, g_meas, prep.space)
    bpos = prep.net.bus_position
    sched = prep.data.schedule[:, [bpos[b] for b in view.p_buses]]
    return s_r, sched


def run_phase(prep: PreparedScenario, views: Mapping, graph: CommunicationGraph,
              config: ScenarioConfig, index: int = 0, warm: Mapping | None = None) -> PhaseResult:
    """Run ADMM and detection over ``views`` until a termination branch fires.

    Parameters
    ----------
    warm : mapping, optional
        Region -> ``(T, m_i)`` starting iterate used instead of the configured
        initial point.
    """
    acfg = config.admm
    attack = config.attack
    regions = tuple(sorted(views))
    ledgers = LedgerSet(regions, graph.edges) if config.use_ledger else None
    exch = _Exchange(views, ledgers, attack, acfg.horizon, index)

    states = {}
    for r in regions:
        v = views[r]
        s_r, sched = _region_inputs(prep, v, attack)
        if ledgers is not None:
            ledgers.local[r].append(r, "measurements", {"phase": index, "s": s_r})
            s_r = ledgers.local[r].read_latest("measurements", reader=r).data()["s"]
        x0 = warm[r] if warm is not None and r in warm else initial_point(v, prep.space, acfg, sched)
        states[r] = initialize(v, acfg, s_r, sched, x0)

    exch.send(states, 0)
    for r in regions:
        seed_duals(states[r], exch.receive(r, 0))
    _record_state(ledgers, states, index, 0)

    edges = [(i, j) for (i, j) in graph.directed_edges() if i < j]
    traces = {e: [(0, states[e[0]].x[:, views[e[0]].shared[e[1]]].copy(),
                   states[e[1]].x[:, views[e[1]].shared[e[0]]].copy())] for e in edges}

    detect = config.detection.enabled and len(regions) > 1
    trust = TrustState(graph, config.detection) if detect else None
    res = PhaseResult(index, regions, "exhausted", acfg.max_iter, INCONCLUSIVE, views, {},
                      traces=traces, ledgers=ledgers)

    for k in range(1, acfg.max_iter + 1):
        for r in regions:
            x_update(states[r])
            if attack.corrupts_messages(r, k) and attack.corrupt_own_state:
                st = states[r]
                sup = views[r].shared_support
                for row, t in enumerate(acfg.horizon):
                    st.x[row, sup] += attack_vector(attack, k, 0, int(t), sup.size)
        exch.send(states, k)
        inbox = {r: exch.receive(r, k) for r in regions}
        for r in regions:
            psi_update(states[r], inbox[r])
            upsilon_update(states[r])
        _record_state(ledgers, states, index, k)

        disp = max(states[r].displacement() for r in regions)
        gap = 0.0
        state_gap = 0.0
        for i in regions:
            for j, pos in views[i].shared.items():
                own = states[i].x[:, pos]
                gap = max(gap, float(np.max(np.abs(own - inbox[i][j]))))
                state_gap = max(state_gap, float(np.max(np.abs(own - states[j].x[:, views[j].shared[i]]))))
        res.displacement.append(disp)
        res.gap.append(gap)
        res.state_gap.append(state_gap)
        for (i, j) in edges:
            traces[(i, j)].append((k, states[i].x[:, views[i].shared[j]].copy(),
                                   states[j].x[:, views[j].shared[i]].copy()))

        verdict = INCONCLUSIVE
        if trust is not None:
            own = {(i, j): extract_shared(states[i], j) for (i, j) in graph.directed_edges()}
            recv = {(i, j): inbox[i][j] for (i, j) in graph.directed_edges()}
            verdict = trust.step(own, recv)
            res.pi_history.append(trust.pi.copy())
            if trust.info.fix is not None:
                res.fallback_rounds += 1
            if ledgers is not None:
                for i in regions:
                    ledgers.glob.append(i, "disagreement", {
                        "phase": index, "k": k,
                        "d": {str(j): trust.d[(i, j)] for j in graph.neighbors(i)}})
                ledgers.glob.append(SYSTEM, "trust_score", {
                    "phase": index, "k": k, "regions": np.array(regions), "pi": trust.pi})
                ledgers.glob.append(SYSTEM, "verdict", {"phase": index, "k": k, "verdict": str(verdict)})

        state_ok = disp <= acfg.tol and gap <= acfg.tol
        if state_ok:
            res.status, res.iterations = "converged", k
            if verdict.kind == "attacker":
                res.notes.append(f"round {k}: verdict {verdict} ignored, states had converged")
            break
        if verdict.kind == "attacker":
            res.status, res.iterations, res.verdict = "verdict", k, verdict
            break
        if config.literal_or_termination and verdict.kind == "none":
            res.status, res.iterations, res.verdict = "pi_stable", k, verdict
            break
    else:
        res.notes.append(f"no termination within {acfg.max_iter} rounds "
                         f"(displacement {res.displacement[-1]:.3e}, gap {res.gap[-1]:.3e})")

    if trust is not None:
        res.d = dict(trust.d)
        if res.verdict.kind != "attacker":
            res.verdict = trust.verdict
    res.x = {r: states[r].x.copy() for r in regions}
    return res


# ---------------------------------------------------------------- driver

def run_verification(config: ScenarioConfig, prepared: PreparedScenario | None = None) -> RunReport:
    """Full robust verification: phases, isolation of accused regions, restarts.

    ``prepared`` lets a sweep reuse the parsed case and generated data; its
    scenario must match ``config`` apart from the attack, detection, ADMM
    and termination settings.
    """
    t0 = time.perf_counter()
    prep = prepared if prepared is not None else prepare(config)
    n_regions = len(prep.regions)
    max_restarts = config.max_restarts if config.max_restarts is not None else n_regions - 1

    pending = [(prep.views, prep.graph, None)]
    phases: list[PhaseResult] = []
    isolated: list[int] = []
    while pending:
        views, graph, warm = pending.pop(0)
        res = run_phase(prep, views, graph, config, index=len(phases), warm=warm)
        phases.append(res)
        if res.status != "verdict":
            continue
        if len(isolated) >= max_restarts:
            res.notes.append(f"restart budget {max_restarts} used up; {res.verdict} not isolated")
            continue
        r = res.verdict.region
        isolated.append(r)
        res.superseded = True
        nviews, ngraph, comps = remove_region(views, graph, r)
        for comp in comps:
            sub_warm = {i: res.x[i] for i in comp} if config.warm_start else None
            pending.append((restrict_views(nviews, comp), ngraph.subgraph(comp), sub_warm))

    final = [p for p in phases if not p.superseded]
    if any(not p.converged for p in final):
        outcome = "exhausted"
    elif isolated:
        outcome = "attacker_isolated"
    else:
        outcome = "converged"

    all_views = {}
    local_x = {}
    for p in final:
        all_views.update(p.views)
        local_x.update(p.x)
    x = stitch(all_views, local_x, prep.space.m)
    report = RunReport(outcome, isolated, phases, x, prep.data.truth, prep.data.schedule, [],
                       config=config.to_dict(),
                       metadata={"hash": HASH_NAME, "version": __version__,
                                 "n_regions": n_regions, "m": prep.space.m,
                                 "base_mva": prep.net.base_mva,
                                 "ledger_entries": sum(p.ledgers.n_entries() for p in phases
                                                       if p.ledgers is not None)})
    report.deviations = compute_deviations(report, prep)
    report.wall_clock = time.perf_counter() - t0
    return report


def compute_deviations(report: RunReport, prep: PreparedScenario) -> list[dict]:
    """Scheduled minus verified injection per bus and time index.

    Buses whose owning region was isolated, or whose group did not converge,
    are listed last with ``deviation = None`` and status ``"unavailable"``.
    The substation is skipped: it has no schedule.
    """
    converged_regions = {r for p in report.final_phases if p.converged for r in p.regions}
    owner = prep.assignment.mapping
    sub = prep.net.substation.id
    horizon = prep.config.admm.horizon
    rows = []
    for bpos, bus in enumerate(prep.space.bus_ids):
        if bus == sub:
            continue
        g = prep.space.bus_var(bus, "p")
        region = owner[bus]
        for row, t in enumerate(horizon):
            sched = float(report.schedule[row, bpos])
            ok = region in converged_regions and not math.isnan(report.x[row, g])
            verified = float(report.x[row, g]) if ok else None
            rows.append({
                "bus": bus, "t": t, "region": region, "scheduled": sched,
                "verified": verified,
                "deviation": sched - verified if ok else None,
                "status": "ok" if ok else "unavailable",
            })
    rows.sort(key=lambda r: (r["deviation"] is None,
                             -abs(r["deviation"]) if r["deviation"] is not None else 0.0,
                             r["bus"], r["t"]))
    return rows


def centralized_reference(prep: PreparedScenario, views: Mapping | None = None) -> np.ndarray:
    """Dense oracle for the consensus problem held by ``views`` (default: all regions)."""
    views = prep.views if views is None else views
    return solve_centralized(prep.space, prep.constraints, prep.data.measurements,
                             prep.data.schedule, prep.config.admm, views=views)


# ---------------------------------------------------------------- audit

@dataclass(frozen=True)
class AuditResult:
    messages: int
    discrepancies: int
    chains_ok: bool
    details: tuple = ()

    @property
    def ok(self) -> bool:
        return self.chains_ok and self.discrepancies == 0


def audit_phase(phase: PhaseResult, n_times: int) -> AuditResult:
    """Replay a phase's ledgers and rebuild every neighbor average from channel entries.

    For each region and round, the slices found in the incoming channels are
    averaged exactly as the region would and compared bit for bit with the
    ``psi`` recorded in its local ledger. Channels must only connect regions
    of this phase, and every recorded trust score must match the phase
    history.
    """
    L = phase.ledgers
    if L is None:
        raise ValueError("phase ran without ledgers")
    details = []
    chains = L.verify()
    chains_ok = all(ok for ok, _ in chains.values())
    if not chains_ok:
        details.extend(f"{name}: broken at {idx}" for name, (ok, idx) in chains.items() if not ok)
    members = set(phase.regions)
    for (i, j) in L.channels:
        if i not in members or j not in members:
            details.append(f"channel {i}->{j} leaves the phase")

    by_channel = {}
    for (i, j), lg in L.channels.items():
        for e in lg.entries("shared_slice", author=i):
            data = e.data()
            if data["phase"] != phase.index or data["to"] != j:
                details.append(f"channel {i}->{j} entry {e.seq} has wrong header")
            by_channel[(i, j, data["k"])] = data["slice"]
    messages = len(by_channel)

    for r in phase.regions:
        view = phase.views[r]
        for e in L.local[r].entries("admm_state", author=r):
            data = e.data()
            k = data["k"]
            try:
                msgs = {j: by_channel[(j, r, k)] for j in view.neighbors}
            except KeyError as exc:
                details.append(f"region {r} round {k}: missing message {exc}")
                continue
            psi = neighbor_average(view, msgs, n_times)
            if not np.array_equal(psi, data["psi"]):
                details.append(f"region {r} round {k}: psi mismatch")

    recorded = [e.data()["pi"] for e in L.glob.entries("trust_score", author=SYSTEM)]
    if len(recorded) != len(phase.pi_history) or not all(
            np.array_equal(a, b) for a, b in zip(recorded, phase.pi_history)):
        details.append("trust-score history differs from the global ledger")
    return AuditResult(messages, len(details), chains_ok, tuple(details))


def audit_report(report: RunReport) -> AuditResult:
    n_times = len(report.config["admm"]["horizon"])
    parts = [audit_phase(p, n_times) for p in report.phases]
    return AuditResult(sum(a.messages for a in parts), sum(a.discrepancies for a in parts),
                       all(a.chains_ok for a in parts), tuple(d for a in parts for d in a.details))


# ---------------------------------------------------------------- outputs

def _fmt(v: float) -> str:
    return repr(float(v))


def write_traces(report: RunReport, space, directory: Path) -> list[Path]:
    """One CSV per neighbor pair: phase, k, region, t, variable, value."""
    directory.mkdir(parents=True, exist_ok=True)
    horizon = report.config["admm"]["horizon"]
    pairs: dict[tuple[int, int], list] = {}
    for phase in report.phases:
        for (i, j), seq in phase.traces.items():
            pairs.setdefault((i, j), []).append((phase, seq))
    paths = []
    for (i, j), items in sorted(pairs.items()):
        path = directory / f"trace_{i}_{j}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "k", "region", "t", "var_name", "value"])
            for phase, seq in items:
                names_i = [space.names[g] for g in phase.views[i].shared_global[j]]
                for k, xi, xj in seq:
                    for region, arr in ((i, xi), (j, xj)):
                        for row, t in enumerate(horizon):
                            for name, val in zip(names_i, arr[row]):
                                w.writerow([phase.index, k, region, t, name, _fmt(val)])
        paths.append(path)
    return paths


def emit_outputs(report: RunReport, config: ScenarioConfig, out_dir=None, *,
                 traces: bool = True, space=None, ledgers: bool = True) -> list[Path]:
    """Write traces, trust-score tables, the JSON report and ledger dumps.

    Returns the written paths. ``space`` (the run's variable space) is needed
    for trace variable names; it is rebuilt from the case when omitted.
    """
    out = Path(out_dir if out_dir is not None else (config.output_dir or "gridverify-out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = []
    if traces:
        if space is None:
            space = build_variable_space(load_case(config.case_path), config.measurement_policy)
        paths += write_traces(report, space, out / "traces")

    pi_path = out / "pi.csv"
    with open(pi_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "k", "region", "pi"])
        for p in report.phases:
            for k, pi in enumerate(p.pi_history, 1):
                for r, v in zip(p.regions, pi):
                    w.writerow([p.index, k, r, _fmt(v)])
    paths.append(pi_path)

    bar_path = out / "pi_final.csv"
    with open(bar_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "region", "pi"])
        for p in report.phases:
            if p.final_pi is not None:
                for r, v in zip(p.regions, p.final_pi):
                    w.writerow([p.index, r, _fmt(v)])
    paths.append(bar_path)

    rep_path = out / "report.json"
    with open(rep_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True, default=str)
    paths.append(rep_path)

    if ledgers:
        for p in report.phases:
            if p.ledgers is not None:
                paths += p.ledgers.dump(out / "ledgers" / f"phase{p.index}")
    return paths


def format_deviation_table(rows: list[dict], limit: int | None = None, base_mva: float = 1.0) -> str:
    """Fixed-width deviation table; per-unit values are scaled by ``base_mva`` to MW."""
    lines = [f"{'bus':>5} {'t':>3} {'region':>6} {'sched MW':>12} {'verified MW':>12} {'dev MW':>12}"]
    for row in rows[:limit] if limit else rows:
        sched = row["scheduled"] * base_mva + 0.0  # no "-0.000000"
        if row["deviation"] is None:
            lines.append(f"{row['bus']:>5} {row['t']:>3} {row['region']:>6} "
                         f"{sched:>12.6f} {'unavailable':>12} {'':>12}")
        else:
            lines.append(f"{row['bus']:>5} {row['t']:>3} {row['region']:>6} {sched:>12.6f} "
                         f"{row['verified'] * base_mva:>12.6f} {row['deviation'] * base_mva + 0.0:>12.6f}")
    return "\n".join(lines)


# ----------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepRun:
    attacker: int
    seed: int
    verdict: str
    argmax: int | None
    pi: tuple
    pi_converged: bool
    iterations: int


def run_sweep(config: ScenarioConfig, attackers, seeds, *, rho: float | None = None,
              prepared: PreparedScenario | None = None) -> list[SweepRun]:
    """State-update attack from each region in turn, once per seed.

    Only the first phase matters here, so isolation is disabled
    (``max_restarts=0``).
    """
    prep = prepared if prepared is not None else prepare(config)
    runs = []
    for j in attackers:
        for seed in seeds:
            att = AttackSpec(attacker=j, kind="state_update",
                             rho=config.attack.rho if rho is None else rho, seed=seed,
                             start_iteration=config.attack.start_iteration)
            cfg = config.replace(attack=att, max_restarts=0)
            rep = run_verification(cfg, prepared=prep)
            ph = rep.phases[0]
            pi = ph.final_pi
            argmax = None if pi is None else int(ph.regions[int(np.argmax(pi))])
            conv = (len(ph.pi_history) >= 2 and
                    float(np.max(np.abs(ph.pi_history[-1] - ph.pi_history[-2]))) <= config.detection.eps_pi)
            runs.append(SweepRun(j, seed, str(ph.verdict), argmax,
                                 tuple(pi.tolist()) if pi is not None else (), conv, ph.iterations))
    return runs
