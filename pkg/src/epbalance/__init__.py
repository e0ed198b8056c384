"""Expert-parallel MoE load-balance planner and lookahead pipeline simulator."""

from .core import (
    Assignment,
    ClusterSpec,
    DedupModel,
    EfficiencyCurve,
    Placement,
    Plan,
    ScenarioError,
    SourceRouting,
    validate_scenario,
)

__all__ = [
    "Assignment",
    "ClusterSpec",
    "DedupModel",
    "EfficiencyCurve",
    "Placement",
    "Plan",
    "ScenarioError",
    "SourceRouting",
    "validate_scenario",
]
