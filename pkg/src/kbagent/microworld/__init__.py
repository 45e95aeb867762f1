"""Miniature deterministic text world with weighted milestone scoring."""

from .engine import (
    DEFAULT_RELATIONS,
    INVENTORY,
    ActionResult,
    ParsedAction,
    WorldObject,
    WorldState,
    action_arguments,
    apply_action,
    parse_action,
    predicate_holds,
)
from .tasks import (
    Milestone,
    ResolvedTask,
    Simulator,
    fresh_env_kb,
    load_task_file,
    register_default_relations,
    resolve_task,
    score,
)

__all__ = [
    "DEFAULT_RELATIONS",
    "INVENTORY",
    "ActionResult",
    "Milestone",
    "ParsedAction",
    "ResolvedTask",
    "Simulator",
    "WorldObject",
    "WorldState",
    "action_arguments",
    "apply_action",
    "fresh_env_kb",
    "load_task_file",
    "parse_action",
    "predicate_holds",
    "register_default_relations",
    "resolve_task",
    "score",
]
