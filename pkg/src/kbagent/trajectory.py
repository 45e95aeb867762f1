"""Trajectory types shared by the simulator, distiller, and dataset builders."""

from __future__ import annotations

from dataclasses import dataclass, field

from .kb import SubGoalUnit, Triple


@dataclass(frozen=True)
class StepRecord:
    """One interaction step: the action, what the agent saw, and the
    structured mirror of that feedback."""

    action: str
    observation: str
    facts: tuple[Triple, ...]
    milestone_hits: tuple[int, ...] = ()
    accepted: bool = True
    moved: bool = False


@dataclass
class SubGoal:
    name: str
    steps: list[StepRecord]
    exp_unit: SubGoalUnit | None = None

    def __post_init__(self):
        if not self.steps:
            raise ValueError(f"sub-goal {self.name!r} has no actions")

    @property
    def actions(self) -> list[tuple[str, str]]:
        return [(s.action, s.observation) for s in self.steps]

    @property
    def action_texts(self) -> list[str]:
        return [s.action for s in self.steps]


@dataclass
class Trajectory:
    task_id: str
    variation: int
    goal: str
    subgoals: list[SubGoal] = field(default_factory=list)

    def __post_init__(self):
        if not self.subgoals:
            raise ValueError("trajectory has no sub-goals")

    @property
    def run_id(self) -> str:
        return f"{self.task_id}/{self.variation}"

    def all_steps(self) -> list[StepRecord]:
        return [step for sg in self.subgoals for step in sg.steps]
