"""Training-data construction from expert trajectories.

Two datasets come out of replay: one pairs sub-goal queries with the stored
facts about the objects the demonstration touched (everything else in the
snapshot is the negative pool), the other pairs sub-goals whose action
trajectories embed similarly above a cosine threshold, using the partner's
experiential unit as the positive.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import interacted_objects
from .embedding import EmbeddingModel, TrainingInstance, cosine
from .errors import ReplayDivergence
from .kb import Triple
from .microworld.tasks import Simulator, fresh_env_kb
from .rendering import (
    render_action_trajectory,
    render_env_query,
    render_exp_query,
    render_plan_position,
    render_triple,
    render_unit,
)
from .retrieval import QueryBundle, RetrievalConfig, doc_from_triple, retrieve
from .trajectory import SubGoal, Trajectory

logger = logging.getLogger(__name__)


@dataclass
class EnvSnapshot:
    """Env KB contents captured around each sub-goal of one replayed
    trajectory: states[i] is the triple list immediately before sub-goal i's
    first action; states[-1] is the state after the last sub-goal."""

    states: list[list[Triple]]

    def before(self, i: int) -> list[Triple]:
        return self.states[i]

    def after(self, i: int) -> list[Triple]:
        return self.states[i + 1]

    @property
    def subgoal_count(self) -> int:
        return len(self.states) - 1


def collect_env_knowledge(sim: Simulator, trajectory: Trajectory) -> EnvSnapshot:
    """Replay a trajectory and capture the env KB around every sub-goal.

    The store starts empty except for the initial observation's facts. Raises
    ReplayDivergence when the simulator refuses an expert action.
    """
    state, result = sim.reset(trajectory.task_id, trajectory.variation)
    kb = fresh_env_kb()
    kb.ingest(result.facts, step=0)
    states: list[list[Triple]] = []
    for sg in trajectory.subgoals:
        states.append(kb.triples())
        for step_record in sg.steps:
            state, result = sim.step(state, step_record.action)
            if not result.accepted:
                raise ReplayDivergence(
                    f"{trajectory.run_id}: action {step_record.action!r} was refused on replay"
                )
            kb.ingest(result.facts, step=state.step_count)
    states.append(kb.triples())
    return EnvSnapshot(states=states)


def partition_snapshot(
    snapshot_triples: list[Triple], objects: set[str]
) -> tuple[list[Triple], list[Triple]]:
    """Split a snapshot into (related, unrelated) halves for one sub-goal."""
    positives: list[Triple] = []
    negatives: list[Triple] = []
    for t in snapshot_triples:
        if t.subject in objects or (t.value.is_entity and t.value.text in objects):
            positives.append(t)
        else:
            negatives.append(t)
    return positives, negatives


def build_env_dataset(
    snapshot: EnvSnapshot,
    trajectory: Trajectory,
    seed: int,
    m: int = 8,
) -> list[TrainingInstance]:
    """min(|P|, |N|) balanced instances per sub-goal.

    Positives are the canonical-order prefix of the related set (independent
    of the seed); each instance draws m negatives without replacement from
    the unrelated set, fewer when the pool is short.
    """
    if snapshot.subgoal_count != len(trajectory.subgoals):
        raise ValueError("snapshot is not aligned with the trajectory")
    rng = np.random.default_rng(seed)
    plan = [sg.name for sg in trajectory.subgoals]
    instances: list[TrainingInstance] = []
    for i, sg in enumerate(trajectory.subgoals):
        objects = interacted_objects(sg)
        positives, negatives = partition_snapshot(snapshot.before(i), objects)
        count = min(len(positives), len(negatives))
        if count == 0:
            logger.info(
                "%s sub-goal %d (%s): no balanced instances (%d related, %d unrelated)",
                trajectory.run_id, i, sg.name, len(positives), len(negatives),
            )
            continue
        if len(negatives) < m:
            logger.info(
                "%s sub-goal %d: negative pool %d smaller than m=%d",
                trajectory.run_id, i, len(negatives), m,
            )
        query = render_env_query(trajectory.goal, sg.name, plan[i:])
        neg_texts = [render_triple(t) for t in negatives]
        for positive in positives[:count]:
            take = min(m, len(neg_texts))
            chosen = rng.choice(len(neg_texts), size=take, replace=False)
            instances.append(
                TrainingInstance(
                    query=query,
                    positive=render_triple(positive),
                    negatives=tuple(neg_texts[j] for j in sorted(chosen)),
                )
            )
    return instances


def subgoal_similarity(sg_a: SubGoal, sg_b: SubGoal, model: EmbeddingModel) -> float:
    """Cosine similarity of the embedded action trajectories."""
    va = model.embed(render_action_trajectory(sg_a.action_texts))
    vb = model.embed(render_action_trajectory(sg_b.action_texts))
    return cosine(va, vb)


@dataclass
class PairSet:
    threshold: float
    pairs: set[tuple[int, int]] = field(default_factory=set)

    def add(self, i: int, j: int) -> None:
        if i == j:
            raise ValueError("self-pairs are not allowed")
        self.pairs.add((i, j))
        self.pairs.add((j, i))

    def partners_of(self, i: int) -> set[int]:
        return {b for a, b in self.pairs if a == i}

    def __contains__(self, pair: tuple[int, int]) -> bool:
        return pair in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)


def find_similar_pairs(
    subgoals: list[SubGoal], model: EmbeddingModel, theta: float
) -> PairSet:
    """All unordered pairs with trajectory similarity strictly above theta."""
    if not 0 < theta <= 1:
        raise ValueError("theta must be in (0, 1]")
    pair_set = PairSet(threshold=theta)
    vecs = [model.embed(render_action_trajectory(sg.action_texts)) for sg in subgoals]
    for i in range(len(subgoals)):
        for j in range(i + 1, len(subgoals)):
            if float(np.dot(vecs[i], vecs[j])) > theta:
                pair_set.add(i, j)
    return pair_set


@dataclass
class ExpDatasetReport:
    pair_count: int = 0
    instance_count: int = 0
    skipped_insufficient_negatives: int = 0


def integrated_env_context(
    goal: str,
    subgoal_name: str,
    remaining_plan: list[str],
    snapshot_triples: list[Triple],
    model: EmbeddingModel,
    top_k: int,
) -> list[Triple]:
    """Env knowledge for a query, integrated the way the live agent gets it:
    as the top-k environmental retrieval results, not the whole store."""
    corpus = [doc_from_triple(i, t) for i, t in enumerate(snapshot_triples)]
    bundle = QueryBundle(
        task_description=goal,
        plan_text=render_plan_position(subgoal_name, remaining_plan),
    )
    cfg = RetrievalConfig(k_candidates=max(top_k, 1), k_final=max(top_k, 1))
    result = retrieve(corpus, bundle, model, cfg)
    return [snapshot_triples[d.doc.doc_id] for d in result.docs]


def build_exp_dataset(
    trajectories: list[Trajectory],
    snapshots: list[EnvSnapshot],
    model: EmbeddingModel,
    theta: float,
    m: int,
    seed: int,
    report: ExpDatasetReport | None = None,
    env_top_k: int = 5,
) -> list[TrainingInstance]:
    """Instances from similarity-paired sub-goals across all trajectories.

    The query combines the goal, the sub-goal's action trajectory, and the
    env knowledge retrieved from its snapshot (so training queries mirror
    the agent's live joint queries). The positive is the paired partner's
    unit. Negatives are m seeded draws from units neither paired with the
    sub-goal nor its own; instances with fewer than m available negatives
    are skipped and logged.
    """
    if len(trajectories) != len(snapshots):
        raise ValueError("one snapshot per trajectory required")
    flat: list[SubGoal] = []
    queries: list[str] = []
    for trajectory, snapshot in zip(trajectories, snapshots):
        if snapshot.subgoal_count != len(trajectory.subgoals):
            raise ValueError(f"{trajectory.run_id}: snapshot/trajectory mismatch")
        plan = [sg.name for sg in trajectory.subgoals]
        for i, sg in enumerate(trajectory.subgoals):
            if sg.exp_unit is None:
                raise ValueError(f"{trajectory.run_id} sub-goal {i} has no exp_unit")
            context = integrated_env_context(
                trajectory.goal, sg.name, plan[i:], snapshot.before(i), model, env_top_k
            )
            flat.append(sg)
            queries.append(render_exp_query(trajectory.goal, sg.action_texts, context))
    pair_set = find_similar_pairs(flat, model, theta)
    if report is not None:
        report.pair_count = len(pair_set)
    rng = np.random.default_rng(seed)
    unit_texts = [render_unit(sg.exp_unit) for sg in flat]
    instances: list[TrainingInstance] = []
    for i, j in sorted(pair_set.pairs):
        excluded = pair_set.partners_of(i) | {i}
        pool = [k for k in range(len(flat)) if k not in excluded]
        if len(pool) < m:
            logger.info(
                "pair (%d, %d): only %d unpaired units for m=%d; instance skipped",
                i, j, len(pool), m,
            )
            if report is not None:
                report.skipped_insufficient_negatives += 1
            continue
        chosen = rng.choice(len(pool), size=m, replace=False)
        negatives = tuple(unit_texts[pool[k]] for k in sorted(chosen))
        instances.append(
            TrainingInstance(query=queries[i], positive=unit_texts[j], negatives=negatives)
        )
    if report is not None:
        report.instance_count = len(instances)
    return instances


# --- dataset persistence ---

DATASET_SCHEMA_VERSION = 1


def save_dataset(
    path: str | Path,
    instances: list[TrainingInstance],
    manifest: dict,
) -> None:
    lines = [
        json.dumps(
            {"kind": "header", "schema_version": DATASET_SCHEMA_VERSION, **manifest},
            ensure_ascii=False,
            separators=(", ", ": "),
        )
    ]
    for inst in instances:
        lines.append(
            json.dumps(
                {
                    "query": inst.query,
                    "positive": inst.positive,
                    "negatives": list(inst.negatives),
                },
                ensure_ascii=False,
                separators=(", ", ": "),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> tuple[list[TrainingInstance], dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported dataset schema")
    instances = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        instances.append(
            TrainingInstance(
                query=rec["query"],
                positive=rec["positive"],
                negatives=tuple(rec["negatives"]),
            )
        )
    manifest = {k: v for k, v in header.items() if k not in ("kind", "schema_version")}
    return instances, manifest
