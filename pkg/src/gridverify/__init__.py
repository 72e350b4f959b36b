"""Decentralized, attack-aware verification of prosumer injections on radial feeders."""

__version__ = "0.1.0"

from .admm import AdmmConfig, solve_centralized  # noqa: E402
from .adversary import AttackSpec, craft_stealth_attack, stealth_feasibility  # noqa: E402
from .detection import DetectionConfig, TrustState, Verdict  # noqa: E402
from .grid import (  # noqa: E402
    assemble_constraints,
    build_variable_space,
    load_case,
    parse_case,
    solve_power_flow,
)
from .ledger import Ledger, LedgerSet, verify_chain  # noqa: E402
from .orchestrator import (  # noqa: E402
    RunReport,
    ScenarioConfig,
    emit_outputs,
    generate_scenario_data,
    prepare,
    run_verification,
)
from .partition import assign_regions, build_region_views, load_region_map  # noqa: E402

__all__ = [
    "AdmmConfig", "AttackSpec", "DetectionConfig", "Ledger", "LedgerSet", "RunReport",
    "ScenarioConfig", "TrustState", "Verdict", "assemble_constraints", "assign_regions",
    "build_region_views", "build_variable_space", "craft_stealth_attack", "emit_outputs",
    "generate_scenario_data", "load_case", "load_region_map", "parse_case", "prepare",
    "run_verification", "solve_centralized", "solve_power_flow", "stealth_feasibility",
    "verify_chain",
]
