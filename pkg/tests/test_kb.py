import numpy as np
import pytest

from kbagent.errors import (
    InvalidUnit,
    RelationChannelConflict,
    SchemaVersionMismatch,
    StaleWrite,
    StoreParseError,
    UnregisteredRelation,
)
from kbagent.kb import (
    Channel,
    EnvKnowledgeBase,
    ExpKnowledgeBase,
    Provenance,
    Relation,
    SubGoalUnit,
    Triple,
    attribute,
    entity_ref,
    load_kbs,
    normalize_name,
    save_kbs,
)

EXAMINE = Relation("act:examine", Channel.ACTION_FEEDBACK)
LOCATED = Relation("located", Channel.OBSERVATION)


def make_kb() -> EnvKnowledgeBase:
    kb = EnvKnowledgeBase()
    kb.register_relation("act:examine", Channel.ACTION_FEEDBACK)
    kb.register_relation("located", Channel.OBSERVATION)
    return kb


def triple(subject, relation, value, step, task="t0") -> Triple:
    return Triple(subject=subject, relation=relation, value=value, step_index=step, task_id=task)


def test_normalize_is_idempotent_and_nonempty():
    assert normalize_name("  Pot   OF Water ") == "pot of water"
    assert normalize_name(normalize_name("  Pot   OF Water ")) == "pot of water"
    with pytest.raises(ValueError):
        normalize_name("   ")


def test_thermometer_reading_supersedes():
    kb = make_kb()
    kb.upsert(triple("thermometer", EXAMINE, attribute("20", "°C"), 3))
    kb.upsert(triple("thermometer", EXAMINE, attribute("24", "°C"), 9))
    assert len(kb) == 1
    stored = kb.get("thermometer", "act:examine")
    assert stored.value.text == "24"
    assert stored.step_index == 9


def test_upsert_identical_triple_is_idempotent():
    kb = make_kb()
    t = triple("pot", LOCATED, entity_ref("stove"), 2)
    kb.upsert(t)
    kb.upsert(t)
    assert len(kb) == 1
    assert kb.get("pot", "located") == t
    assert kb.superseded_count == 0


def test_fifty_distinct_keys_all_retrievable():
    kb = make_kb()
    inserted = set()
    for i in range(50):
        subject = f"obj{i}"
        kb.upsert(triple(subject, LOCATED, entity_ref("room"), 1))
        inserted.add((subject, "located"))
    assert len(kb) == 50
    assert {t.key for t in kb} == inserted


def test_stale_write_rejected_equal_step_wins():
    kb = make_kb()
    kb.upsert(triple("pot", LOCATED, entity_ref("stove"), 5))
    with pytest.raises(StaleWrite):
        kb.upsert(triple("pot", LOCATED, entity_ref("sink"), 4))
    kb.upsert(triple("pot", LOCATED, entity_ref("sink"), 5))
    assert kb.get("pot", "located").value.text == "sink"


def test_unregistered_relation_rejected():
    kb = make_kb()
    with pytest.raises(UnregisteredRelation):
        kb.upsert(triple("pot", Relation("weighs", Channel.OBSERVATION), attribute("1kg"), 1))


def test_relation_channel_is_fixed_per_name():
    kb = make_kb()
    with pytest.raises(RelationChannelConflict):
        kb.register_relation("located", Channel.ACTION_FEEDBACK)


def test_ingest_empty_batch_is_noop():
    kb = make_kb()
    kb.ingest([], step=4)
    assert len(kb) == 0


def test_ingest_twice_is_idempotent():
    kb = make_kb()
    batch = [
        triple("pot", LOCATED, entity_ref("stove"), 3),
        triple("water", LOCATED, entity_ref("pot"), 3),
    ]
    kb.ingest(batch, step=3)
    first = {t.key: t for t in kb}
    kb.ingest(batch, step=3)
    assert {t.key: t for t in kb} == first


def test_ingest_later_duplicate_wins():
    kb = make_kb()
    batch = [
        triple("pot", LOCATED, entity_ref("stove"), 3),
        triple("pot", LOCATED, entity_ref("sink"), 3),
    ]
    kb.ingest(batch, step=3)
    # fold-left oracle: apply one by one into a dict
    oracle: dict = {}
    for t in batch:
        oracle[t.key] = t
    assert {t.key: t for t in kb} == oracle
    assert kb.get("pot", "located").value.text == "sink"


def test_ingest_is_atomic():
    kb = make_kb()
    kb.upsert(triple("pot", LOCATED, entity_ref("stove"), 5))
    bad_batch = [
        triple("water", LOCATED, entity_ref("pot"), 2),
        triple("pot", LOCATED, entity_ref("sink"), 2),  # stale vs step 5
    ]
    with pytest.raises(StaleWrite):
        kb.ingest(bad_batch, step=2)
    assert len(kb) == 1
    assert kb.get("water", "located") is None


def test_ingest_rejects_mixed_steps():
    kb = make_kb()
    with pytest.raises(ValueError):
        kb.ingest([triple("pot", LOCATED, entity_ref("stove"), 2)], step=3)


def test_query_entity_unknown_is_empty():
    assert make_kb().query_entity("ghost") == []


def test_query_entity_matches_linear_scan_oracle():
    kb = make_kb()
    triples = [
        triple("stove", LOCATED, entity_ref("kitchen"), 1),
        triple("pot", LOCATED, entity_ref("stove"), 2),
        triple("pot", EXAMINE, attribute("empty"), 3),
        triple("water", LOCATED, entity_ref("pot"), 4),
    ]
    for t in triples:
        kb.upsert(t)
    result = kb.query_entity("pot")
    oracle = [
        t
        for t in triples
        if t.subject == "pot" or (t.value.is_entity and t.value.text == "pot")
    ]
    oracle.sort(key=lambda t: (t.relation.name, t.step_index, t.subject))
    assert result == oracle
    assert len(result) == 3  # pot located, pot examined, water in pot


def test_query_entity_invariant_under_insertion_order():
    rng = np.random.default_rng(11)
    triples = [
        triple(f"s{i}", LOCATED, entity_ref(f"v{i % 3}"), 1) for i in range(12)
    ]
    kb_a, kb_b = make_kb(), make_kb()
    for t in triples:
        kb_a.upsert(t)
    for idx in rng.permutation(len(triples)):
        kb_b.upsert(triples[idx])
    for probe in ("s3", "v0", "v2", "nope"):
        assert kb_a.query_entity(probe) == kb_b.query_entity(probe)


def unit(name="fill the pot", task="boil-water/0") -> SubGoalUnit:
    return SubGoalUnit(
        name=name,
        relevant_env_knowledge=[triple("pot", LOCATED, entity_ref("stove"), 2)],
        associated_entities=["Pot", "pot", "stove"],
        reflections=["put the vessel on the heater first"],
        action_trajectory=["take pot", "put pot on stove"],
        provenance=Provenance.EXPERT,
        source_task_id=task,
    )


def test_exp_store_ids_are_dense_and_ordered():
    kb = ExpKnowledgeBase()
    assert kb.add(unit("a")) == 0
    for i in range(1, 10):
        assert kb.add(unit(f"u{i}")) == i
    assert [u.name for u in kb][:2] == ["a", "u1"]


def test_unit_entities_are_normalized_and_deduplicated():
    u = unit()
    assert u.associated_entities == ["pot", "stove"]


def test_invalid_units_rejected():
    with pytest.raises(InvalidUnit):
        SubGoalUnit(
            name=" ",
            relevant_env_knowledge=[],
            associated_entities=[],
            reflections=[],
            action_trajectory=["x"],
            provenance=Provenance.EXPERT,
            source_task_id="t",
        )
    with pytest.raises(InvalidUnit):
        SubGoalUnit(
            name="ok",
            relevant_env_knowledge=[],
            associated_entities=[],
            reflections=[],
            action_trajectory=[],
            provenance=Provenance.EXPERT,
            source_task_id="t",
        )


def test_empty_stores_round_trip(tmp_path):
    path = tmp_path / "kb.jsonl"
    save_kbs(path, EnvKnowledgeBase(), ExpKnowledgeBase())
    env, exp = load_kbs(path)
    assert len(env) == 0 and len(exp) == 0


def _random_store(seed: int, n_triples: int, n_units: int):
    rng = np.random.default_rng(seed)
    env = make_kb()
    step = 0
    for _ in range(n_triples):
        step += int(rng.integers(0, 2))
        subject = f"obj {rng.integers(0, 200)}"
        if rng.random() < 0.5:
            value = entity_ref(f"place {rng.integers(0, 40)}")
        else:
            value = attribute(str(rng.integers(0, 99)), "°C" if rng.random() < 0.4 else None)
        rel = LOCATED if rng.random() < 0.6 else EXAMINE
        existing = env.get(subject, rel.name)
        at = max(step, existing.step_index if existing else 0)
        env.upsert(triple(subject, rel, value, at, task=f"task{rng.integers(0, 4)}"))
    exp = ExpKnowledgeBase()
    for i in range(n_units):
        exp.add(unit(f"unit {i}", task=f"task{i % 4}"))
    return env, exp


def test_randomized_store_round_trips_exactly(tmp_path):
    env, exp = _random_store(3, 1000, 100)
    path = tmp_path / "kb.jsonl"
    save_kbs(path, env, exp)
    env2, exp2 = load_kbs(path)
    assert {t.key: t for t in env} == {t.key: t for t in env2}
    assert env.relations == env2.relations
    assert exp.units() == exp2.units()


def test_canonical_serialization_is_insertion_order_independent(tmp_path):
    rng = np.random.default_rng(5)
    triples = [
        triple(f"s{i}", LOCATED, entity_ref(f"v{i}"), 2, task="t") for i in range(40)
    ]
    kb_a, kb_b = make_kb(), make_kb()
    for t in triples:
        kb_a.upsert(t)
    for idx in rng.permutation(len(triples)):
        kb_b.upsert(triples[idx])
    path_a, path_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_kbs(path_a, kb_a, ExpKnowledgeBase())
    save_kbs(path_b, kb_b, ExpKnowledgeBase())
    assert path_a.read_bytes() == path_b.read_bytes()


def test_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "kb.jsonl"
    save_kbs(path, make_kb(), ExpKnowledgeBase())
    lines = path.read_text().splitlines()
    lines.insert(2, "{broken json")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(StoreParseError) as err:
        load_kbs(path)
    assert err.value.line_no == 3


def test_schema_version_mismatch(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text('{"kind": "header", "schema_version": 99}\n')
    with pytest.raises(SchemaVersionMismatch):
        load_kbs(path)
