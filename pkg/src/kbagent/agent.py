"""Planner/actuator/evaluator scaffold over a pluggable decision model.

Each action step retrieves from the environmental store, then from the
experiential store (optionally folding the environmental results into that
query), asks the decision model for an action, steps the world, and ingests
the emitted facts back into the environmental store. Every retrieval, action,
and verdict lands in an append-only memory log.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .distill import Backend, RuleBased, decompose, distill_subgoals
from .embedding import EmbeddingModel
from .errors import DecisionModelError
from .kb import EnvKnowledgeBase, ExpKnowledgeBase, Provenance
from .microworld.engine import ActionResult, WorldState
from .microworld.tasks import ResolvedTask, Simulator
from .rendering import render_plan_position
from .retrieval import (
    CorpusIndex,
    Document,
    QueryBundle,
    RetrievalConfig,
    doc_from_triple,
    doc_from_unit,
    retrieve,
)
from .trajectory import StepRecord, SubGoal, Trajectory

logger = logging.getLogger(__name__)


@dataclass
class Plan:
    steps: list[str]
    current_index: int = 0

    def __post_init__(self):
        if not 0 <= self.current_index <= len(self.steps):
            raise ValueError("plan index out of range")

    @property
    def current_step(self) -> str:
        if self.current_index < len(self.steps):
            return self.steps[self.current_index]
        return "finish the task"

    def advance(self) -> None:
        if self.current_index < len(self.steps):
            self.current_index += 1


class VerdictStatus(str, Enum):
    ON_TRACK = "on_track"
    STEP_DONE = "step_done"
    DEVIATED = "deviated"
    TASK_DONE = "task_done"


@dataclass(frozen=True)
class EvalVerdict:
    status: VerdictStatus
    rationale: str = ""


@dataclass(frozen=True)
class MemoryEvent:
    step: int
    kind: str  # plan_set | action_taken | retrieval_made | verdict_made
    payload: dict


class MemoryLog:
    """Append-only, strictly ordered event record for one episode."""

    def __init__(self):
        self._events: list[MemoryEvent] = []
        self._counter = 0

    def append(self, kind: str, payload: dict) -> MemoryEvent:
        event = MemoryEvent(step=self._counter, kind=kind, payload=payload)
        self._counter += 1
        self._events.append(event)
        return event

    def events(self, kind: str | None = None) -> list[MemoryEvent]:
        if kind is None:
            return list(self._events)
        return [e for e in self._events if e.kind == kind]

    def tail(self, n: int) -> list[MemoryEvent]:
        return self._events[-n:]

    def __len__(self) -> int:
        return len(self._events)


@dataclass
class AgentConfig:
    use_kb: bool = True
    joint_knowledge: bool = True
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    memory_window: int = 20


class DecisionModel:
    """Planner/actuator/evaluator capabilities; subclasses implement all three."""

    def propose_plan(
        self, task_text: str, memory: list[MemoryEvent], docs: list[Document]
    ) -> Plan:
        raise NotImplementedError

    def propose_action(
        self, plan_step: str, memory: list[MemoryEvent], docs: list[Document]
    ) -> str:
        raise NotImplementedError

    def evaluate(self, memory: list[MemoryEvent], last_result: ActionResult) -> EvalVerdict:
        raise NotImplementedError


class ScriptedOracle(DecisionModel):
    """Replays a fixed expert script; the reference decision model for tests.

    The plan defaults to the task's milestone names; pass ``plan_steps`` (for
    example the expert trajectory's sub-goal names) to override.
    """

    def __init__(self, task: ResolvedTask, plan_steps: list[str] | None = None):
        self.task = task
        self.script = list(task.expert_script)
        self.cursor = 0
        self.plan_steps = list(plan_steps) if plan_steps else [m.name for m in self.task.milestones]

    def propose_plan(self, task_text, memory, docs) -> Plan:
        return Plan(steps=list(self.plan_steps))

    def propose_action(self, plan_step, memory, docs) -> str:
        if self.cursor >= len(self.script):
            return "wait"
        action = self.script[self.cursor]
        self.cursor += 1
        return action

    def evaluate(self, memory, last_result) -> EvalVerdict:
        if last_result.terminal:
            return EvalVerdict(VerdictStatus.TASK_DONE, "environment reports completion")
        if last_result.milestone_hits:
            return EvalVerdict(VerdictStatus.STEP_DONE, "milestone reached")
        if not last_result.accepted:
            return EvalVerdict(VerdictStatus.DEVIATED, "action was refused")
        return EvalVerdict(VerdictStatus.ON_TRACK, "following the script")


class NoisyScripted(ScriptedOracle):
    """Scripted oracle with seeded corruption.

    With probability ``noise_p`` the scripted action is replaced by a
    harmless time-wasting action (the script position is kept, so the agent
    retries the real action next step). A corruption is suppressed when the
    retrieved experiential docs contain the upcoming scripted action inside a
    unit trajectory: good retrieval rescues the step.
    """

    def __init__(
        self,
        task: ResolvedTask,
        noise_p: float,
        seed: int,
        plan_steps: list[str] | None = None,
    ):
        super().__init__(task, plan_steps)
        if not 0 <= noise_p <= 1:
            raise ValueError("noise_p must be in [0, 1]")
        self.noise_p = noise_p
        self.rng = np.random.default_rng(seed)
        self.seen_entities: list[str] = []

    def observe_entities(self, facts) -> None:
        for fact in facts:
            if fact.subject not in self.seen_entities and fact.subject != "agent":
                self.seen_entities.append(fact.subject)

    def propose_action(self, plan_step, memory, docs) -> str:
        if self.cursor >= len(self.script):
            return "wait"
        action = self.script[self.cursor]
        if self.rng.random() < self.noise_p and not self._rescued(action, docs):
            return self._distraction()
        self.cursor += 1
        return action

    def _rescued(self, action: str, docs: list[Document]) -> bool:
        for doc in docs:
            if doc.payload_kind == "exp_unit" and action in doc.text.splitlines():
                return True
        return False

    def _distraction(self) -> str:
        choices = ["wait", "look around"]
        choices.extend(f"examine {name}" for name in self.seen_entities[:8])
        return choices[int(self.rng.integers(len(choices)))]


@dataclass
class EpisodeResult:
    score: float
    steps_used: int
    budget: int
    memory: MemoryLog
    trajectory: Trajectory | None
    kb_added: int
    kb_superseded: int
    error: str | None = None
    final_env_triples: list = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return self.error is None


def exp_corpus_docs(exp_kb: ExpKnowledgeBase) -> list[Document]:
    return [doc_from_unit(i, i, unit) for i, unit in enumerate(exp_kb.units())]


def env_corpus_docs(env_kb: EnvKnowledgeBase) -> list[Document]:
    return [doc_from_triple(i, t) for i, t in enumerate(env_kb.triples())]


def run_episode(
    sim: Simulator,
    task_id: str,
    variation: int,
    env_kb: EnvKnowledgeBase,
    exp_kb: ExpKnowledgeBase,
    dm: DecisionModel,
    model: EmbeddingModel,
    cfg: AgentConfig,
    budget: int,
) -> EpisodeResult:
    """One bounded episode: retrieve, act, ingest, evaluate, until the task
    reports completion or the budget runs out."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    task = sim.resolve(task_id, variation)
    state, result = sim.reset(task_id, variation)
    memory = MemoryLog()
    added = 0
    superseded = 0
    records: list[StepRecord] = []
    error: str | None = None

    def ingest(res: ActionResult, at_step: int):
        nonlocal added, superseded
        if res.facts:
            before = len(env_kb)
            superseded += env_kb.ingest(res.facts, step=at_step)
            added += len(env_kb) - before

    ingest(result, 0)
    if isinstance(dm, NoisyScripted):
        dm.observe_entities(result.facts)

    exp_index = CorpusIndex(exp_corpus_docs(exp_kb), model) if (cfg.use_kb and len(exp_kb)) else None

    def retrieve_pair(plan: Plan, segment_actions: list[str]) -> list[Document]:
        """Env retrieval, then exp retrieval (optionally env-augmented).

        Queries are rendered in the same canonical forms the training
        datasets use: the env query carries the plan position, the exp query
        carries the action trajectory of the current plan step.
        """
        docs: list[Document] = []
        env_docs: list[Document] = []
        if len(env_kb):
            env_bundle = QueryBundle(
                task_description=task.goal,
                plan_text=render_plan_position(
                    plan.current_step, plan.steps[plan.current_index :]
                ),
            )
            env_res = retrieve(env_corpus_docs(env_kb), env_bundle, model, cfg.retrieval)
            memory.append(
                "retrieval_made",
                {
                    "kind": "environmental",
                    "query": env_res.query_text,
                    "doc_ids": [d.doc.doc_id for d in env_res.docs],
                },
            )
            env_docs = [d.doc for d in env_res.docs]
            docs.extend(env_docs)
        if exp_index is not None:
            context = tuple(env_docs) if cfg.joint_knowledge else ()
            exp_bundle = QueryBundle(
                task_description=task.goal,
                plan_text="\n".join([plan.current_step, *segment_actions]),
                env_context=context,
            )
            exp_res = retrieve(
                exp_index.corpus, exp_bundle, model, cfg.retrieval, index=exp_index
            )
            memory.append(
                "retrieval_made",
                {
                    "kind": "experiential",
                    "query": exp_res.query_text,
                    "doc_ids": [d.doc.doc_id for d in exp_res.docs],
                },
            )
            docs.extend(d.doc for d in exp_res.docs)
        return docs

    try:
        bootstrap_plan = Plan(steps=["survey the task"])
        plan_docs = retrieve_pair(bootstrap_plan, []) if cfg.use_kb else []
        plan = dm.propose_plan(task.goal, memory.tail(cfg.memory_window), plan_docs)
        memory.append("plan_set", {"steps": list(plan.steps)})

        steps_used = 0
        segment_actions: list[str] = []
        while steps_used < budget:
            retrieved = retrieve_pair(plan, segment_actions) if cfg.use_kb else []
            action = dm.propose_action(
                plan.current_step, memory.tail(cfg.memory_window), retrieved
            )
            state, result = sim.step(state, action)
            steps_used += 1
            segment_actions.append(action)
            memory.append(
                "action_taken", {"action": action, "observation": result.observation}
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
            ingest(result, state.step_count)
            if isinstance(dm, NoisyScripted):
                dm.observe_entities(result.facts)
            verdict = dm.evaluate(memory.tail(cfg.memory_window), result)
            memory.append(
                "verdict_made",
                {"status": verdict.status.value, "rationale": verdict.rationale},
            )
            if verdict.status is VerdictStatus.TASK_DONE:
                break
            if verdict.status is VerdictStatus.STEP_DONE:
                plan.advance()
                segment_actions = []
            elif verdict.status is VerdictStatus.DEVIATED:
                replan_docs = retrieve_pair(plan, segment_actions) if cfg.use_kb else []
                plan = dm.propose_plan(
                    task.goal, memory.tail(cfg.memory_window), replan_docs
                )
                memory.append("plan_set", {"steps": list(plan.steps)})
    except DecisionModelError as exc:
        error = str(exc)
        steps_used = len(records)
        logger.warning("episode aborted: %s", exc)

    trajectory = None
    if records:
        trajectory = Trajectory(
            task_id=task_id,
            variation=variation,
            goal=task.goal,
            subgoals=decompose(records),
        )
    return EpisodeResult(
        score=sim.score(state),
        steps_used=steps_used,
        budget=budget,
        memory=memory,
        trajectory=trajectory,
        kb_added=added,
        kb_superseded=superseded,
        error=error,
        final_env_triples=env_kb.triples(),
    )


def ingest_self_experience(
    result: EpisodeResult,
    exp_kb: ExpKnowledgeBase,
    backend: Backend = RuleBased(),
) -> list[int]:
    """Distill a finished episode into self-generated units; returns new ids.

    Episodes that scored 0 are skipped (nothing was achieved worth keeping).
    Repeated ingestion of the same result appends duplicates; the store is
    append-only by design.
    """
    if result.score <= 0 or result.trajectory is None:
        logger.info("skipping self-experience ingestion: score %.1f", result.score)
        return []
    subgoals = result.trajectory.subgoals
    contexts = [result.final_env_triples for _ in subgoals]
    units = distill_subgoals(
        subgoals,
        contexts,
        backend,
        provenance=Provenance.SELF_GENERATED,
        source_task_id=result.trajectory.run_id,
    )
    return [exp_kb.add(unit) for unit in units]
