"""Trajectory distillation: segmentation into sub-goals and unit extraction.

The rule-based backend is a pure function of its inputs: it segments at
location changes and simulator-reported milestone completions, and extracts
the three summary components (entities, relevant knowledge, reflections)
from structured step records. A decision-model-backed backend can replace
it; its response must follow the line grammar parsed below. The prompts and
grammar are defined by this repo, not by any external source.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

from .errors import BackendError, MalformedModelResponse
from .kb import Provenance, SubGoalUnit, Triple
from .microworld.engine import action_arguments
from .rendering import render_triple
from .trajectory import StepRecord, SubGoal

logger = logging.getLogger(__name__)


class TextCompleter(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass(frozen=True)
class RuleBased:
    """Deterministic distiller backend."""


@dataclass(frozen=True)
class DecisionModelBacked:
    handle: TextCompleter


Backend = RuleBased | DecisionModelBacked


def interacted_objects(sg: SubGoal) -> set[str]:
    """Normalized names appearing as arguments of the sub-goal's actions."""
    names: set[str] = set()
    for step in sg.steps:
        names.update(action_arguments(step.action))
    return names


def related_triples(triples: list[Triple], entities: set[str]) -> list[Triple]:
    """Triples whose subject or entity-value falls in ``entities``."""
    return [
        t
        for t in triples
        if t.subject in entities or (t.value.is_entity and t.value.text in entities)
    ]


def decompose(steps: list[StepRecord], backend: Backend = RuleBased()) -> list[SubGoal]:
    """Contiguous, exhaustive segmentation of an action record sequence."""
    if not steps:
        raise ValueError("cannot decompose an empty trajectory")
    if isinstance(backend, DecisionModelBacked):
        return _decompose_via_model(steps, backend.handle)
    segments: list[list[StepRecord]] = []
    current: list[StepRecord] = []
    for step in steps:
        if step.moved and current:
            segments.append(current)
            current = []
        current.append(step)
        if step.milestone_hits:
            segments.append(current)
            current = []
    if current:
        segments.append(current)
    return [
        SubGoal(name=f"carry out: {seg[-1].action}", steps=seg)
        for seg in segments
    ]


def extract_unit(
    sg: SubGoal,
    env_context: list[Triple],
    backend: Backend = RuleBased(),
    provenance: Provenance = Provenance.EXPERT,
    source_task_id: str = "",
) -> SubGoalUnit:
    """Build the experiential unit for one sub-goal."""
    if isinstance(backend, DecisionModelBacked):
        return _extract_via_model(sg, env_context, backend.handle, provenance, source_task_id)
    entities = interacted_objects(sg)
    relevant = related_triples(env_context, entities)
    reflections = []
    for step in sg.steps:
        for _ in step.milestone_hits:
            decisive = render_triple(step.facts[0]) if step.facts else "no new fact"
            reflections.append(
                f"progress came from the action '{step.action}'; decisive fact: {decisive}"
            )
    if not reflections:
        reflections.append(
            f"no milestone here; the segment set up '{sg.steps[-1].action}'"
        )
    return SubGoalUnit(
        name=sg.name,
        relevant_env_knowledge=relevant,
        associated_entities=sorted(entities),
        reflections=reflections,
        action_trajectory=sg.action_texts,
        provenance=provenance,
        source_task_id=source_task_id,
    )


def distill_subgoals(
    subgoals: list[SubGoal],
    contexts: list[list[Triple]],
    backend: Backend = RuleBased(),
    provenance: Provenance = Provenance.EXPERT,
    source_task_id: str = "",
) -> list[SubGoalUnit]:
    """Extract a unit per sub-goal and attach it in place."""
    if len(subgoals) != len(contexts):
        raise ValueError("one env context per sub-goal required")
    units = []
    for sg, context in zip(subgoals, contexts):
        unit = extract_unit(sg, context, backend, provenance, source_task_id)
        sg.exp_unit = unit
        units.append(unit)
    return units


# --- decision-model-backed path ---
#
# Response grammar for extraction (one block per component, dash items):
#
#   ENTITIES:
#   - pot
#   KNOWLEDGE:
#   - pot | located | stove
#   REFLECTIONS:
#   - Put the vessel on the heater before activating it.
#
# Knowledge items must match the canonical rendering of a context triple.
# For segmentation the grammar is one line per segment:
#
#   SEGMENT: <start>..<end> | <name>
#
# with 0-based inclusive step indices that exactly partition the input.

_EXTRACT_PROMPT = """Summarize this action segment for reuse.
Actions and observations:
{steps}

Known facts:
{facts}

Answer with three blocks, exactly in this order and format:
ENTITIES:
- <entity name>
KNOWLEDGE:
- <one known fact, verbatim>
REFLECTIONS:
- <one sentence of reusable guidance>
"""

_DECOMPOSE_PROMPT = """Split this action sequence into coherent segments.
Steps (0-based):
{steps}

Answer with one line per segment:
SEGMENT: <start>..<end> | <name>
Segments must cover all steps in order without overlap.
"""


def _call(handle: TextCompleter, prompt: str) -> str:
    try:
        return handle.complete(prompt)
    except Exception as exc:
        raise BackendError(str(exc)) from exc


def _parse_blocks(raw: str) -> dict[str, list[str]]:
    blocks: dict[str, list[str]] = {}
    current: str | None = None
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.rstrip(":").upper() in ("ENTITIES", "KNOWLEDGE", "REFLECTIONS") and line.endswith(":"):
            current = line.rstrip(":").upper()
            blocks[current] = []
        elif line.startswith("- "):
            if current is None:
                raise MalformedModelResponse("item outside any block", raw)
            blocks[current].append(line[2:].strip())
        else:
            raise MalformedModelResponse(f"unrecognized line: {line!r}", raw)
    missing = {"ENTITIES", "KNOWLEDGE", "REFLECTIONS"} - blocks.keys()
    if missing:
        raise MalformedModelResponse(f"missing blocks: {sorted(missing)}", raw)
    return blocks


def _extract_via_model(
    sg: SubGoal,
    env_context: list[Triple],
    handle: TextCompleter,
    provenance: Provenance,
    source_task_id: str,
) -> SubGoalUnit:
    prompt = _EXTRACT_PROMPT.format(
        steps="\n".join(f"{a} -> {o}" for a, o in sg.actions),
        facts="\n".join(render_triple(t) for t in env_context),
    )
    raw = _call(handle, prompt)
    blocks = _parse_blocks(raw)
    by_rendering = {render_triple(t): t for t in env_context}
    knowledge = []
    for item in blocks["KNOWLEDGE"]:
        triple = by_rendering.get(item)
        if triple is None:
            raise MalformedModelResponse(f"knowledge item matches no known fact: {item!r}", raw)
        knowledge.append(triple)
    if not blocks["REFLECTIONS"]:
        raise MalformedModelResponse("empty reflections block", raw)
    return SubGoalUnit(
        name=sg.name,
        relevant_env_knowledge=knowledge,
        associated_entities=blocks["ENTITIES"],
        reflections=blocks["REFLECTIONS"],
        action_trajectory=sg.action_texts,
        provenance=provenance,
        source_task_id=source_task_id,
    )


def _decompose_via_model(steps: list[StepRecord], handle: TextCompleter) -> list[SubGoal]:
    prompt = _DECOMPOSE_PROMPT.format(
        steps="\n".join(f"{i}: {s.action}" for i, s in enumerate(steps))
    )
    raw = _call(handle, prompt)
    spans: list[tuple[int, int, str]] = []
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        if not line.startswith("SEGMENT:"):
            raise MalformedModelResponse(f"unrecognized line: {line!r}", raw)
        body = line[len("SEGMENT:"):].strip()
        span, _, name = body.partition("|")
        name = name.strip()
        start_s, _, end_s = span.strip().partition("..")
        try:
            start, end = int(start_s), int(end_s)
        except ValueError:
            raise MalformedModelResponse(f"bad span: {span.strip()!r}", raw) from None
        if not name:
            raise MalformedModelResponse(f"segment missing a name: {line!r}", raw)
        spans.append((start, end, name))
    expected = 0
    for start, end, _ in spans:
        if start != expected or end < start:
            raise MalformedModelResponse("segments do not partition the steps", raw)
        expected = end + 1
    if expected != len(steps):
        raise MalformedModelResponse("segments do not cover all steps", raw)
    return [SubGoal(name=name, steps=list(steps[start : end + 1])) for start, end, name in spans]


def make_backend(handle: TextCompleter | None) -> Backend:
    return DecisionModelBacked(handle) if handle is not None else RuleBased()


def segmentation_is_partition(steps: list[StepRecord], subgoals: list[SubGoal]) -> bool:
    flat = [s for sg in subgoals for s in sg.steps]
    return flat == list(steps)
