import math

import numpy as np
import pytest

from kbagent.embedding import (
    EmbeddingModel,
    TrainConfig,
    TrainingInstance,
    cosine,
    grad_to_dense,
    info_nce_grad,
    info_nce_loss,
    recall_at_k,
    train,
)
from kbagent.errors import EmptyEvalSetWarning, UnknownDocId
from kbagent.textutil import FEATURE_DIM, featurize, l2_normalize

WORDS = [
    "pot", "stove", "water", "kitchen", "thermometer", "cabinet", "fan",
    "workshop", "open", "take", "activate", "focus", "pour", "bowl", "juice",
    "note", "key", "drawer", "go", "read", "heat", "warm", "cold", "room",
]


def random_text(rng, lo=2, hi=10) -> str:
    n = int(rng.integers(lo, hi))
    return " ".join(rng.choice(WORDS) for _ in range(n))


def small_model(seed=0, d_feat=FEATURE_DIM, d_emb=16) -> EmbeddingModel:
    return EmbeddingModel(d_feat=d_feat, d_emb=d_emb, seed=seed)


def test_embeddings_are_unit_norm():
    model = small_model()
    rng = np.random.default_rng(0)
    for _ in range(25):
        vec = model.embed(random_text(rng))
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-9


def test_degenerate_text_embeds_to_zero():
    model = small_model()
    assert np.all(model.embed("") == 0.0)
    assert np.all(model.embed("!!! ...") == 0.0)


def test_embed_is_deterministic():
    model = small_model()
    a = model.embed("take the pot")
    b = model.embed("take the pot")
    assert np.array_equal(a, b)
    fresh = small_model()
    assert np.array_equal(a, fresh.embed("take the pot"))


def test_cosine_matches_independent_oracle():
    model = small_model(seed=3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        ta, tb = random_text(rng), random_text(rng)
        got = cosine(model.embed(ta), model.embed(tb))

        def oracle_embed(text):
            counts = featurize(text, model.d_feat)
            x = np.zeros(model.d_feat)
            for k, v in counts.items():
                x[k] = v
            n = np.linalg.norm(x)
            if n == 0:
                return np.zeros(model.d_emb)
            z = model.W.T @ (x / n)
            zn = np.linalg.norm(z)
            return z / zn if zn > 0 else np.zeros(model.d_emb)

        expected = float(np.dot(oracle_embed(ta), oracle_embed(tb)))
        assert abs(got - expected) < 1e-9


def test_scale_robustness_of_token_counts():
    # tripling every token count leaves the embedding unchanged
    model = small_model()
    single = model.embed("pot stove")
    tripled = model.embed("pot pot pot stove stove stove")
    assert np.allclose(single, tripled, atol=1e-12)


def test_identity_like_model_orthogonal_on_disjoint_buckets():
    d = 64
    model = EmbeddingModel(d_feat=d, d_emb=d, weights=np.eye(d))
    a, b = "pot", "stove"
    fa = l2_normalize(featurize(a, d))
    fb = l2_normalize(featurize(b, d))
    assert set(fa) != set(fb)
    assert abs(cosine(model.embed(a), model.embed(b))) < 1e-9


def uniform_instance(m: int) -> TrainingInstance:
    # every candidate l2-normalizes to the same feature vector as the
    # positive, so all logits are equal without violating text inequality
    negatives = tuple("pot " * (i + 2) for i in range(m))
    return TrainingInstance(query="stove water", positive="pot", negatives=negatives)


@pytest.mark.parametrize("m", [1, 4, 8])
def test_uniform_logits_loss_is_ln_m_plus_1(m):
    model = small_model()
    loss = info_nce_loss(model, [uniform_instance(m)], tau=0.05)
    assert abs(loss - math.log(m + 1)) < 1e-9


def test_degenerate_query_also_gives_ln_m_plus_1():
    model = small_model()
    inst = TrainingInstance(query="???", positive="pot", negatives=("stove", "water"))
    assert abs(info_nce_loss(model, [inst], tau=0.05) - math.log(3)) < 1e-9


def random_instance(rng, m=4) -> TrainingInstance:
    negatives = []
    positive = random_text(rng)
    while len(negatives) < m:
        neg = random_text(rng)
        if neg != positive:
            negatives.append(neg)
    return TrainingInstance(query=random_text(rng), positive=positive, negatives=tuple(negatives))


def test_loss_matches_unstabilized_extended_precision_oracle():
    from decimal import Decimal, getcontext

    getcontext().prec = 60
    model = small_model(seed=9)
    rng = np.random.default_rng(10)
    batch = [random_instance(rng) for _ in range(12)]
    tau = 0.05
    got = info_nce_loss(model, batch, tau)

    total = Decimal(0)
    for inst in batch:
        q = model.embed(inst.query)
        sims = [cosine(q, model.embed(inst.positive))]
        sims += [cosine(q, model.embed(n)) for n in inst.negatives]
        exps = [Decimal(s / tau).exp() for s in sims]
        total += -(exps[0] / sum(exps)).ln()
    expected = float(total / len(batch))
    assert got >= 0.0
    assert abs(got - expected) < 1e-9


def test_loss_floor_nonnegative():
    model = small_model(seed=2)
    rng = np.random.default_rng(3)
    for _ in range(50):
        batch = [random_instance(rng, m=int(rng.integers(1, 6)))]
        assert info_nce_loss(model, batch, tau=0.05) >= 0.0


def fd_entry(model, batch, tau, bucket, col, h=1e-5) -> float:
    saved = model.W[bucket, col]
    model.W[bucket, col] = saved + h
    model._embed_cache.clear()
    plus = info_nce_loss(model, batch, tau)
    model.W[bucket, col] = saved - h
    model._embed_cache.clear()
    minus = info_nce_loss(model, batch, tau)
    model.W[bucket, col] = saved
    model._embed_cache.clear()
    return (plus - minus) / (2 * h)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def test_gradient_matches_central_finite_differences():
    model = small_model(seed=5, d_emb=12)
    rng = np.random.default_rng(6)
    tau = 0.05
    batch = [random_instance(rng)]
    rows = info_nce_grad(model, batch, tau)
    support = sorted(rows)
    assert support, "gradient support is empty"
    worst = 0.0
    picks = rng.choice(len(support), size=min(50, len(support)), replace=False)
    for pick in picks:
        bucket = support[int(pick)]
        col = int(rng.integers(model.d_emb))
        analytic = rows[bucket][col]
        numeric = fd_entry(model, batch, tau, bucket, col)
        worst = max(worst, rel_err(analytic, numeric))
    assert worst <= 1e-4


def test_gradient_zero_outside_support():
    model = small_model(seed=5, d_emb=8)
    rng = np.random.default_rng(8)
    batch = [random_instance(rng)]
    rows = info_nce_grad(model, batch, tau=0.05)
    touched = set()
    for inst in batch:
        for text in (inst.query, inst.positive, *inst.negatives):
            touched |= set(featurize(text, model.d_feat))
    assert set(rows) <= touched
    untouched = next(b for b in range(model.d_feat) if b not in touched)
    assert fd_entry(model, batch, 0.05, untouched, 0) == 0.0


def test_degenerate_query_contributes_zero_gradient():
    model = small_model()
    inst = TrainingInstance(query="...", positive="pot", negatives=("stove",))
    rows = info_nce_grad(model, [inst], tau=0.05)
    dense = grad_to_dense(model, rows)
    assert np.all(dense == 0.0)


def test_batch_gradient_is_mean_of_instance_gradients():
    model = small_model(seed=1, d_emb=8)
    rng = np.random.default_rng(2)
    a, b = random_instance(rng), random_instance(rng)
    combined = grad_to_dense(model, info_nce_grad(model, [a, b], tau=0.1))
    ga = grad_to_dense(model, info_nce_grad(model, [a], tau=0.1))
    gb = grad_to_dense(model, info_nce_grad(model, [b], tau=0.1))
    assert np.allclose(combined, (ga + gb) / 2, atol=1e-12)


def make_dataset(rng, n=24) -> list[TrainingInstance]:
    return [random_instance(rng, m=3) for _ in range(n)]


def test_zero_epochs_leaves_model_unchanged():
    model = small_model(seed=4)
    rng = np.random.default_rng(5)
    result = train(model, make_dataset(rng), TrainConfig(epochs=0, seed=1))
    assert np.array_equal(result.model.W, model.W)
    assert result.epoch_losses == []


def test_training_is_bit_deterministic():
    rng = np.random.default_rng(6)
    dataset = make_dataset(rng)
    cfg = TrainConfig(epochs=3, seed=42, batch_size=4)
    r1 = train(small_model(seed=4), dataset, cfg)
    r2 = train(small_model(seed=4), dataset, cfg)
    assert np.array_equal(r1.model.W, r2.model.W)
    assert r1.epoch_losses == r2.epoch_losses


def test_training_reduces_loss():
    rng = np.random.default_rng(7)
    dataset = make_dataset(rng, n=32)
    result = train(small_model(seed=4), dataset, TrainConfig(epochs=4, seed=0, batch_size=8))
    assert result.epoch_losses[-1] <= result.epoch_losses[0]
    assert result.epoch_losses[0] < result.initial_loss


def test_model_save_load_round_trip(tmp_path):
    model = EmbeddingModel(d_feat=512, d_emb=8, seed=12)
    path = tmp_path / "model.bin"
    model.save(path)
    loaded = EmbeddingModel.load(path)
    assert loaded.d_feat == 512 and loaded.d_emb == 8 and loaded.seed == 12
    assert np.array_equal(loaded.W, model.W)
    # byte-stable across repeated saves
    again = tmp_path / "model2.bin"
    loaded.save(again)
    assert path.read_bytes() == again.read_bytes()


def test_recall_trivial_and_oracle():
    model = small_model(seed=8)
    corpus = [(i, f"doc about {WORDS[i]}") for i in range(10)]
    eval_set = [(f"query {WORDS[i]}", {i}) for i in range(5)]
    assert recall_at_k(model, eval_set, corpus, k=len(corpus)) == 1.0

    k = 3
    got = recall_at_k(model, eval_set, corpus, k=k)
    hits = 0
    for query, relevant in eval_set:
        qv = model.embed(query)
        scored = sorted(
            ((float(np.dot(model.embed(text), qv)), doc_id) for doc_id, text in corpus),
            key=lambda pair: (-pair[0], pair[1]),
        )
        if any(doc_id in relevant for _, doc_id in scored[:k]):
            hits += 1
    assert got == hits / len(eval_set)


def test_recall_unknown_doc_id():
    model = small_model()
    with pytest.raises(UnknownDocId):
        recall_at_k(model, [("q", {99})], [(0, "doc")], k=1)


def test_recall_empty_eval_set_warns():
    model = small_model()
    with pytest.warns(EmptyEvalSetWarning):
        assert recall_at_k(model, [], [(0, "doc")], k=1) == 0.0
