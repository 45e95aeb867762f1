"""Task loading, variation resolution, and the simulator facade.

Tasks are declarative JSON: rooms, object templates, milestone predicates,
and an expert script, all parameterized by named slots. A variation index
selects slot values by mixed-radix decoding, so every (task, variation) pair
resolves to the same concrete world with no randomness involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from ..errors import ReplayDivergence, UnknownTask
from ..kb import EnvKnowledgeBase
from ..trajectory import StepRecord, SubGoal, Trajectory
from .engine import (
    DEFAULT_RELATIONS,
    ActionResult,
    WorldObject,
    WorldState,
    apply_action,
    initial_result,
    predicate_holds,
)


@dataclass(frozen=True)
class Milestone:
    name: str
    predicate: dict
    weight: float


@dataclass(frozen=True)
class ResolvedTask:
    task_id: str
    variation: int
    goal: str
    start_room: str
    rooms: dict[str, tuple[str, ...]]
    objects: tuple[WorldObject, ...]
    milestones: tuple[Milestone, ...]
    expert_script: tuple[str, ...]
    slots: dict[str, str]


def _resolve_slots(spec: dict, variation: int) -> dict[str, str]:
    slots: dict[str, str] = {}
    pools = spec.get("slots", {})
    total = 1
    for pool in pools.values():
        total *= len(pool)
    v = variation % total if total else 0
    indices: dict[str, int] = {}
    for name, pool in pools.items():
        idx = v % len(pool)
        slots[name] = pool[idx]
        indices[name] = idx
        v //= len(pool)
    for name, rule in spec.get("derived_slots", {}).items():
        source = rule["next_in_pool_after"]
        pool = pools[source]
        slots[name] = pool[(indices[source] + 1) % len(pool)]
    return slots


def _render(template: str, slots: dict[str, str]) -> str:
    return template.format_map(slots)


def resolve_task(spec: dict, variation: int) -> ResolvedTask:
    if variation < 0:
        raise ValueError("variation must be non-negative")
    slots = _resolve_slots(spec, variation)
    objects = []
    for entry in spec["objects"]:
        fields = dict(entry)
        fields["name"] = _render(fields["name"], slots)
        fields["location"] = _render(fields["location"], slots)
        if "text" in fields and fields["text"] is not None:
            fields["text"] = _render(fields["text"], slots)
        objects.append(WorldObject(**fields))
    milestones = []
    for entry in spec["milestones"]:
        pred = {
            k: (_render(v, slots) if isinstance(v, str) else v)
            for k, v in entry["predicate"].items()
        }
        milestones.append(
            Milestone(name=_render(entry["name"], slots), predicate=pred, weight=entry["weight"])
        )
    total_weight = sum(m.weight for m in milestones)
    if abs(total_weight - 100.0) > 1e-9:
        raise ValueError(f"{spec['task_id']}: milestone weights sum to {total_weight}, not 100")
    return ResolvedTask(
        task_id=spec["task_id"],
        variation=variation,
        goal=_render(spec["goal"], slots),
        start_room=spec["start_room"],
        rooms={room: tuple(exits) for room, exits in spec["rooms"].items()},
        objects=tuple(objects),
        milestones=tuple(milestones),
        expert_script=tuple(_render(a, slots) for a in spec["expert_script"]),
        slots=slots,
    )


def _builtin_specs() -> dict[str, dict]:
    specs: dict[str, dict] = {}
    data_dir = resources.files("kbagent.microworld") / "data"
    for entry in sorted(data_dir.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            spec = json.loads(entry.read_text(encoding="utf-8"))
            specs[spec["task_id"]] = spec
    return specs


def load_task_file(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def score(state: WorldState, task: ResolvedTask) -> float:
    """Weighted partial credit: the sum over milestones hit so far."""
    return float(sum(task.milestones[i].weight for i in state.milestones_hit))


class Simulator:
    """Deterministic task environment over the declarative task specs."""

    def __init__(self, specs: dict[str, dict] | None = None):
        self._specs = specs if specs is not None else _builtin_specs()
        self._resolved: dict[tuple[str, int], ResolvedTask] = {}

    def task_ids(self) -> list[str]:
        return sorted(self._specs)

    def add_task_file(self, path: str | Path) -> str:
        spec = load_task_file(path)
        self._specs[spec["task_id"]] = spec
        return spec["task_id"]

    def resolve(self, task_id: str, variation: int) -> ResolvedTask:
        key = (task_id, variation)
        if key not in self._resolved:
            spec = self._specs.get(task_id)
            if spec is None:
                raise UnknownTask(task_id)
            self._resolved[key] = resolve_task(spec, variation)
        return self._resolved[key]

    def reset(self, task_id: str, variation: int) -> tuple[WorldState, ActionResult]:
        task = self.resolve(task_id, variation)
        state = WorldState(
            task_id=task.task_id,
            variation=task.variation,
            rooms=task.rooms,
            objects={o.name: o for o in task.objects},
            agent_location=task.start_room,
        )
        result = initial_result(state)
        state, result = self._check_milestones(state, task, result)
        return state, result

    def step(self, state: WorldState, action_text: str) -> tuple[WorldState, ActionResult]:
        task = self.resolve(state.task_id, state.variation)
        new_state, result = apply_action(state, action_text)
        return self._check_milestones(new_state, task, result)

    def score(self, state: WorldState) -> float:
        return score(state, self.resolve(state.task_id, state.variation))

    def _check_milestones(
        self, state: WorldState, task: ResolvedTask, result: ActionResult
    ) -> tuple[WorldState, ActionResult]:
        hits = [
            i
            for i, milestone in enumerate(task.milestones)
            if i not in state.milestones_hit and predicate_holds(state, milestone.predicate)
        ]
        state.milestones_hit.update(hits)
        terminal = len(state.milestones_hit) == len(task.milestones)
        return state, replace(result, milestone_hits=tuple(hits), terminal=terminal)

    def expert_script(self, task_id: str, variation: int) -> list[str]:
        return list(self.resolve(task_id, variation).expert_script)

    def expert_trajectory(self, task_id: str, variation: int) -> Trajectory:
        """Replay the scripted demonstration, segmented at milestone hits."""
        task = self.resolve(task_id, variation)
        state, _ = self.reset(task_id, variation)
        records: list[StepRecord] = []
        for action in task.expert_script:
            state, result = self.step(state, action)
            if not result.accepted:
                raise ReplayDivergence(
                    f"{task_id}/{variation}: expert action {action!r} was refused"
                )
            records.append(
                StepRecord(
                    action=action,
                    observation=result.observation,
                    facts=result.facts,
                    milestone_hits=result.milestone_hits,
                    accepted=result.accepted,
                    moved=result.moved,
                )
            )
        if score(state, task) != 100.0:
            raise ReplayDivergence(
                f"{task_id}/{variation}: expert script scored {score(state, task)}"
            )
        subgoals: list[SubGoal] = []
        current: list[StepRecord] = []
        for record in records:
            current.append(record)
            if record.milestone_hits:
                # named by the closing action (the distiller's convention), not
                # by the milestone text the planner uses for its plan steps
                subgoals.append(SubGoal(name=f"carry out: {record.action}", steps=current))
                current = []
        if current:
            subgoals[-1].steps.extend(current)
        return Trajectory(
            task_id=task_id, variation=variation, goal=task.goal, subgoals=subgoals
        )


def register_default_relations(env_kb: EnvKnowledgeBase) -> EnvKnowledgeBase:
    for name, channel in DEFAULT_RELATIONS.items():
        env_kb.register_relation(name, channel)
    return env_kb


def fresh_env_kb() -> EnvKnowledgeBase:
    return register_default_relations(EnvKnowledgeBase())
