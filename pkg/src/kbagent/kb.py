"""Dual knowledge base: environmental triples and experiential sub-goal units.

The environmental store keeps at most one triple per (subject, relation) key;
a newer write replaces the stored triple (last writer wins). The experiential
store is append-only with dense integer ids. Both persist to one line-delimited
UTF-8 file whose serialization is a canonical function of store content.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import (
    InvalidUnit,
    RelationChannelConflict,
    SchemaVersionMismatch,
    StaleWrite,
    StoreParseError,
    UnregisteredRelation,
)

SCHEMA_VERSION = 1


def normalize_name(name: str) -> str:
    """Lowercase, collapse whitespace runs to single spaces, strip ends.

    Idempotent; raises ValueError if nothing remains.
    """
    normalized = " ".join(name.lower().split())
    if not normalized:
        raise ValueError(f"entity name is empty after normalization: {name!r}")
    return normalized


class Channel(str, Enum):
    OBSERVATION = "observation"
    ACTION_FEEDBACK = "action_feedback"


class Provenance(str, Enum):
    EXPERT = "expert"
    SELF_GENERATED = "self_generated"


@dataclass(frozen=True)
class Relation:
    name: str
    channel: Channel

    def __post_init__(self):
        object.__setattr__(self, "name", normalize_name(self.name))


@dataclass(frozen=True)
class TripleValue:
    """Either a reference to another entity or a free-text attribute."""

    kind: str  # "entity" | "attribute"
    text: str
    unit: str | None = None

    def __post_init__(self):
        if self.kind not in ("entity", "attribute"):
            raise ValueError(f"bad value kind: {self.kind!r}")
        if self.kind == "entity":
            object.__setattr__(self, "text", normalize_name(self.text))
            if self.unit is not None:
                raise ValueError("entity values carry no unit")

    @property
    def is_entity(self) -> bool:
        return self.kind == "entity"


def entity_ref(name: str) -> TripleValue:
    return TripleValue(kind="entity", text=name)


def attribute(text: str, unit: str | None = None) -> TripleValue:
    return TripleValue(kind="attribute", text=text, unit=unit)


@dataclass(frozen=True)
class Triple:
    subject: str
    relation: Relation
    value: TripleValue
    step_index: int
    task_id: str

    def __post_init__(self):
        object.__setattr__(self, "subject", normalize_name(self.subject))
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject, self.relation.name)


@dataclass
class SubGoalUnit:
    """One experiential record: a named sub-goal plus its extracted summary."""

    name: str
    relevant_env_knowledge: list[Triple]
    associated_entities: list[str]
    reflections: list[str]
    action_trajectory: list[str]
    provenance: Provenance
    source_task_id: str

    def __post_init__(self):
        if not self.name.strip():
            raise InvalidUnit("sub-goal unit has an empty name")
        if not self.action_trajectory:
            raise InvalidUnit(f"sub-goal unit {self.name!r} has an empty trajectory")
        seen: dict[str, None] = {}
        for entity in self.associated_entities:
            seen.setdefault(normalize_name(entity), None)
        self.associated_entities = list(seen)


class EnvKnowledgeBase:
    """Triple store with per-(subject, relation) supersession."""

    def __init__(self):
        self._entries: dict[tuple[str, str], Triple] = {}
        self._relations: dict[str, Channel] = {}
        self.superseded_count = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self._entries.values())

    @property
    def relations(self) -> dict[str, Channel]:
        return dict(self._relations)

    def register_relation(self, name: str, channel: Channel) -> Relation:
        name = normalize_name(name)
        existing = self._relations.get(name)
        if existing is not None and existing is not channel:
            raise RelationChannelConflict(
                f"relation {name!r} already registered on channel {existing.value}"
            )
        self._relations[name] = channel
        return Relation(name, channel)

    def get(self, subject: str, relation_name: str) -> Triple | None:
        return self._entries.get((normalize_name(subject), normalize_name(relation_name)))

    def upsert(self, triple: Triple) -> bool:
        """Insert or replace; returns True when an existing entry was replaced.

        Equal-step conflicts resolve in favor of the incoming triple.
        """
        registered = self._relations.get(triple.relation.name)
        if registered is None:
            raise UnregisteredRelation(triple.relation.name)
        if registered is not triple.relation.channel:
            raise RelationChannelConflict(
                f"triple uses relation {triple.relation.name!r} with channel "
                f"{triple.relation.channel.value}, registered as {registered.value}"
            )
        existing = self._entries.get(triple.key)
        if existing is not None and triple.step_index < existing.step_index:
            raise StaleWrite(
                f"{triple.key}: incoming step {triple.step_index} "
                f"< stored step {existing.step_index}"
            )
        self._entries[triple.key] = triple
        if existing is not None and existing != triple:
            self.superseded_count += 1
        return existing is not None

    def ingest(self, facts: Iterable[Triple], step: int) -> int:
        """Fold a batch of same-step facts through upsert, atomically.

        Later duplicates within the batch win. If any fact would fail, no fact
        is applied. Returns the number of entries that were replacements.
        """
        batch = list(facts)
        for fact in batch:
            if fact.step_index != step:
                raise ValueError(
                    f"fact at step {fact.step_index} in a batch ingested at step {step}"
                )
            registered = self._relations.get(fact.relation.name)
            if registered is None:
                raise UnregisteredRelation(fact.relation.name)
            if registered is not fact.relation.channel:
                raise RelationChannelConflict(
                    f"triple uses relation {fact.relation.name!r} with channel "
                    f"{fact.relation.channel.value}, registered as {registered.value}"
                )
            existing = self._entries.get(fact.key)
            if existing is not None and fact.step_index < existing.step_index:
                raise StaleWrite(
                    f"{fact.key}: incoming step {fact.step_index} "
                    f"< stored step {existing.step_index}"
                )
        replaced = 0
        for fact in batch:
            if self.upsert(fact):
                replaced += 1
        return replaced

    def query_entity(self, entity: str) -> list[Triple]:
        """Triples whose subject or entity-value equals ``entity``.

        Ordered by (relation name, step index); unknown entities yield [].
        """
        entity = normalize_name(entity)
        hits = [
            t
            for t in self._entries.values()
            if t.subject == entity or (t.value.is_entity and t.value.text == entity)
        ]
        hits.sort(key=lambda t: (t.relation.name, t.step_index, t.subject))
        return hits

    def triples(self) -> list[Triple]:
        """All triples in canonical (subject, relation) order."""
        return [self._entries[k] for k in sorted(self._entries)]

    def copy(self) -> "EnvKnowledgeBase":
        dup = EnvKnowledgeBase()
        dup._relations = dict(self._relations)
        dup._entries = dict(self._entries)
        return dup


class ExpKnowledgeBase:
    """Append-only store of sub-goal units with dense insertion-order ids."""

    def __init__(self):
        self._units: list[SubGoalUnit] = []

    def __len__(self) -> int:
        return len(self._units)

    def __iter__(self) -> Iterator[SubGoalUnit]:
        return iter(self._units)

    def add(self, unit: SubGoalUnit) -> int:
        if not unit.name.strip():
            raise InvalidUnit("sub-goal unit has an empty name")
        if not unit.action_trajectory:
            raise InvalidUnit(f"sub-goal unit {unit.name!r} has an empty trajectory")
        self._units.append(unit)
        return len(self._units) - 1

    def get(self, unit_id: int) -> SubGoalUnit:
        return self._units[unit_id]

    def units(self) -> list[SubGoalUnit]:
        return list(self._units)


# --- persistence ---
#
# One record per line. Record order is canonical: header, relations sorted by
# name, triples sorted by (subject, relation), units in id order. Field order
# within a record is fixed, so equal stores serialize byte-identically.


def _triple_record(t: Triple) -> dict:
    return {
        "task_id": t.task_id,
        "subject": t.subject,
        "relation": t.relation.name,
        "channel": t.relation.channel.value,
        "value_kind": t.value.kind,
        "value": t.value.text,
        "unit": t.value.unit,
        "step_index": t.step_index,
    }


def _triple_from_record(rec: dict) -> Triple:
    return Triple(
        subject=rec["subject"],
        relation=Relation(rec["relation"], Channel(rec["channel"])),
        value=TripleValue(kind=rec["value_kind"], text=rec["value"], unit=rec["unit"]),
        step_index=rec["step_index"],
        task_id=rec["task_id"],
    )


def _unit_record(unit_id: int, u: SubGoalUnit) -> dict:
    return {
        "id": unit_id,
        "name": u.name,
        "provenance": u.provenance.value,
        "source_task_id": u.source_task_id,
        "associated_entities": u.associated_entities,
        "reflections": u.reflections,
        "action_trajectory": u.action_trajectory,
        "relevant_env_knowledge": [_triple_record(t) for t in u.relevant_env_knowledge],
    }


def _unit_from_record(rec: dict) -> SubGoalUnit:
    return SubGoalUnit(
        name=rec["name"],
        relevant_env_knowledge=[_triple_from_record(r) for r in rec["relevant_env_knowledge"]],
        associated_entities=rec["associated_entities"],
        reflections=rec["reflections"],
        action_trajectory=rec["action_trajectory"],
        provenance=Provenance(rec["provenance"]),
        source_task_id=rec["source_task_id"],
    )


def _dump(kind: str, payload: dict) -> str:
    record = {"kind": kind}
    record.update(payload)
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def save_kbs(path: str | Path, env_kb: EnvKnowledgeBase, exp_kb: ExpKnowledgeBase) -> None:
    lines = [_dump("header", {"schema_version": SCHEMA_VERSION})]
    for name in sorted(env_kb.relations):
        lines.append(_dump("relation", {"name": name, "channel": env_kb.relations[name].value}))
    for triple in env_kb.triples():
        lines.append(_dump("triple", _triple_record(triple)))
    for unit_id, unit in enumerate(exp_kb.units()):
        lines.append(_dump("exp_unit", _unit_record(unit_id, unit)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_kbs(path: str | Path) -> tuple[EnvKnowledgeBase, ExpKnowledgeBase]:
    env_kb = EnvKnowledgeBase()
    exp_kb = ExpKnowledgeBase()
    text = Path(path).read_text(encoding="utf-8")
    header_seen = False
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StoreParseError(str(exc), line_no) from exc
        kind = rec.get("kind")
        try:
            if kind == "header":
                if rec["schema_version"] != SCHEMA_VERSION:
                    raise SchemaVersionMismatch(
                        f"schema {rec['schema_version']}, expected {SCHEMA_VERSION}"
                    )
                header_seen = True
            elif kind == "relation":
                env_kb.register_relation(rec["name"], Channel(rec["channel"]))
            elif kind == "triple":
                env_kb.upsert(_triple_from_record(rec))
            elif kind == "exp_unit":
                unit = _unit_from_record(rec)
                got = exp_kb.add(unit)
                if got != rec["id"]:
                    raise StoreParseError(f"unit id {rec['id']} out of order", line_no)
            else:
                raise StoreParseError(f"unknown record kind {kind!r}", line_no)
        except (KeyError, ValueError) as exc:
            raise StoreParseError(str(exc), line_no) from exc
    if not header_seen:
        raise StoreParseError("missing header record", 1)
    return env_kb, exp_kb


def copy_triple_at_step(t: Triple, step: int) -> Triple:
    return replace(t, step_index=step)
