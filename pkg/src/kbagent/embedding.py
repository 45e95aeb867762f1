"""Trainable knowledge embedder: hashed bag-of-tokens behind a linear map.

The model projects an l2-normalized hashed token-count vector through a dense
matrix W (d_feat x d_emb) and unit-normalizes the result. Texts that tokenize
to nothing embed to the zero vector and score 0 everywhere. Training minimizes
the InfoNCE objective with analytic gradients and plain mini-batch descent.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyEvalSetWarning, NonFiniteLoss, TrainingDiverged, UnknownDocId
from .textutil import FEATURE_DIM, featurize, l2_normalize, tokenize

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1
DEFAULT_EMBED_DIM = 64


class EmbeddingModel:
    """Linear projection of hashed token counts onto the unit sphere."""

    def __init__(
        self,
        d_feat: int = FEATURE_DIM,
        d_emb: int = DEFAULT_EMBED_DIM,
        seed: int = 0,
        weights: np.ndarray | None = None,
    ):
        self.d_feat = d_feat
        self.d_emb = d_emb
        self.seed = seed
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = rng.standard_normal((d_feat, d_emb)) / math.sqrt(d_feat)
        if weights.shape != (d_feat, d_emb):
            raise ValueError(f"weight shape {weights.shape} != ({d_feat}, {d_emb})")
        self.W = np.ascontiguousarray(weights, dtype=np.float64)
        self._embed_cache: dict[str, np.ndarray] = {}
        self._token_vec_cache: dict[str, np.ndarray] = {}

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.d_feat, self.d_emb, self.seed, self.W.copy())

    def features(self, text: str) -> dict[int, float]:
        return l2_normalize(featurize(text, self.d_feat))

    def project(self, normalized: dict[int, float]) -> np.ndarray:
        """W^T x for a sparse unit-norm feature vector; not yet normalized."""
        z = np.zeros(self.d_emb)
        for b, weight in normalized.items():
            z += weight * self.W[b]
        return z

    def embed(self, text: str) -> np.ndarray:
        """Unit-norm embedding; all-zeros for degenerate (token-free) text."""
        cached = self._embed_cache.get(text)
        if cached is not None:
            return cached
        x_hat = self.features(text)
        z = self.project(x_hat)
        norm = float(np.linalg.norm(z))
        vec = z / norm if norm > 0.0 else np.zeros(self.d_emb)
        self._embed_cache[text] = vec
        return vec

    def token_vectors(self, text: str) -> np.ndarray:
        """Per-token unit vectors, one row per token (with multiplicity)."""
        tokens = tokenize(text)
        rows = []
        for token in tokens:
            vec = self._token_vec_cache.get(token)
            if vec is None:
                vec = self.embed(token)
                self._token_vec_cache[token] = vec
            rows.append(vec)
        if not rows:
            return np.zeros((0, self.d_emb))
        return np.stack(rows)

    def save(self, path: str | Path) -> None:
        header = {
            "schema_version": MODEL_SCHEMA_VERSION,
            "d_feat": self.d_feat,
            "d_emb": self.d_emb,
            "seed": self.seed,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, separators=(", ", ": ")).encode("utf-8"))
            fh.write(b"\n")
            fh.write(self.W.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingModel":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            header = json.loads(header_line.decode("utf-8"))
            if header.get("schema_version") != MODEL_SCHEMA_VERSION:
                raise ValueError(f"unsupported model schema: {header.get('schema_version')}")
            d_feat, d_emb = header["d_feat"], header["d_emb"]
            raw = fh.read()
        expected = d_feat * d_emb * 8
        if len(raw) != expected:
            raise ValueError(f"model payload is {len(raw)} bytes, expected {expected}")
        weights = np.frombuffer(raw, dtype="<f8").reshape(d_feat, d_emb)
        return cls(d_feat, d_emb, header["seed"], weights.copy())


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Plain dot product; inputs are unit vectors (or zero when degenerate)."""
    return float(np.dot(a, b))


@dataclass(frozen=True)
class TrainingInstance:
    query: str
    positive: str
    negatives: tuple[str, ...]

    def __post_init__(self):
        if not self.negatives:
            raise ValueError("training instance needs at least one negative")
        if self.positive in self.negatives:
            raise ValueError("positive text also appears among the negatives")


@dataclass
class TrainConfig:
    tau: float = 0.2
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 16
    m: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("tau, learning_rate, and batch_size must be positive")
        if self.epochs < 0 or self.m < 1:
            raise ValueError("epochs must be >= 0 and m >= 1")


def _instance_logits(model: EmbeddingModel, inst: TrainingInstance, tau: float) -> np.ndarray:
    q = model.embed(inst.query)
    sims = [cosine(q, model.embed(inst.positive))]
    sims.extend(cosine(q, model.embed(neg)) for neg in inst.negatives)
    return np.asarray(sims) / tau


def info_nce_loss(model: EmbeddingModel, batch: list[TrainingInstance], tau: float) -> float:
    """Mean InfoNCE over the batch, computed with a max-shift for stability."""
    if not batch:
        raise ValueError("batch is empty")
    total = 0.0
    for inst in batch:
        logits = _instance_logits(model, inst, tau)
        shift = logits.max()
        total += math.log(np.exp(logits - shift).sum()) + shift - logits[0]
    loss = total / len(batch)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss = {loss}")
    return loss


def info_nce_grad(
    model: EmbeddingModel, batch: list[TrainingInstance], tau: float
) -> dict[int, np.ndarray]:
    """Analytic dL/dW as sparse rows: feature bucket -> d_emb gradient row.

    Includes the Jacobian of the output normalization. Instances whose query
    is degenerate contribute nothing; degenerate candidates keep their place
    in the softmax but produce no gradient flow.
    """
    if not batch:
        raise ValueError("batch is empty")
    rows: dict[int, np.ndarray] = {}
    scale = 1.0 / len(batch)

    def add(bucket_weights: dict[int, float], vec: np.ndarray, coeff: float):
        for b, w in bucket_weights.items():
            row = rows.get(b)
            if row is None:
                row = np.zeros(model.d_emb)
                rows[b] = row
            row += (coeff * w) * vec

    for inst in batch:
        xq = model.features(inst.query)
        if not xq:
            continue
        zq = model.project(xq)
        nq = float(np.linalg.norm(zq))
        if nq == 0.0:
            continue
        uq = zq / nq

        texts = [inst.positive, *inst.negatives]
        feats, us, norms, sims = [], [], [], []
        for text in texts:
            xk = model.features(text)
            zk = model.project(xk)
            nk = float(np.linalg.norm(zk))
            uk = zk / nk if nk > 0.0 else np.zeros(model.d_emb)
            feats.append(xk)
            us.append(uk)
            norms.append(nk)
            sims.append(float(np.dot(uq, uk)))

        logits = np.asarray(sims) / tau
        shifted = np.exp(logits - logits.max())
        softmax = shifted / shifted.sum()
        # dL/ds_k = (softmax_k - [k is the positive]) / tau, averaged over batch
        coeffs = softmax.copy()
        coeffs[0] -= 1.0
        coeffs /= tau

        q_side = np.zeros(model.d_emb)
        for c_k, u_k, s_k, x_k, n_k in zip(coeffs, us, sims, feats, norms):
            if c_k == 0.0:
                continue
            q_side += c_k * (u_k - s_k * uq)
            if n_k > 0.0 and x_k:
                add(x_k, (uq - s_k * u_k) / n_k, scale * c_k)
        add(xq, q_side / nq, scale)

    return rows


def grad_to_dense(model: EmbeddingModel, rows: dict[int, np.ndarray]) -> np.ndarray:
    dense = np.zeros((model.d_feat, model.d_emb))
    for b, row in rows.items():
        dense[b] = row
    return dense


@dataclass
class TrainResult:
    model: EmbeddingModel
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def train(
    model: EmbeddingModel, dataset: list[TrainingInstance], cfg: TrainConfig
) -> TrainResult:
    """Seeded mini-batch gradient descent on the contrastive objective.

    The returned model is a copy; the input model is untouched. Epoch losses
    are means over the full training set after each epoch's updates. Raises
    TrainingDiverged when the final epoch's loss exceeds the first epoch's.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    current = model.copy()
    initial_loss = info_nce_loss(current, dataset, cfg.tau)
    logger.info("training on %d instances, initial loss %.6f", len(dataset), initial_loss)
    rng = np.random.default_rng(cfg.seed)
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            grad = info_nce_grad(current, batch, cfg.tau)
            for b, row in grad.items():
                current.W[b] -= cfg.learning_rate * row
            current._embed_cache.clear()
            current._token_vec_cache.clear()
        epoch_loss = info_nce_loss(current, dataset, cfg.tau)
        epoch_losses.append(epoch_loss)
        logger.info("epoch %d/%d: loss %.6f", epoch + 1, cfg.epochs, epoch_loss)
    if epoch_losses and epoch_losses[-1] > epoch_losses[0]:
        raise TrainingDiverged(
            f"final epoch loss {epoch_losses[-1]:.6f} > first epoch loss {epoch_losses[0]:.6f}"
        )
    return TrainResult(model=current, initial_loss=initial_loss, epoch_losses=epoch_losses)


def recall_at_k(
    model: EmbeddingModel,
    eval_set: list[tuple[str, set[int]]],
    corpus: list[tuple[int, str]],
    k: int,
) -> float:
    """Fraction of queries with a relevant doc in the dense top-k.

    Cosine scoring with ties broken by ascending doc id. Every relevant id
    must exist in the corpus.
    """
    if not eval_set:
        warnings.warn("recall over an empty eval set is 0", EmptyEvalSetWarning)
        return 0.0
    ids = [doc_id for doc_id, _ in corpus]
    known = set(ids)
    for _, relevant in eval_set:
        missing = relevant - known
        if missing:
            raise UnknownDocId(f"relevant ids not in corpus: {sorted(missing)}")
    doc_vecs = np.stack([model.embed(text) for _, text in corpus])
    hits = 0
    for query, relevant in eval_set:
        scores = doc_vecs @ model.embed(query)
        ranked = sorted(zip(ids, scores), key=lambda pair: (-pair[1], pair[0]))
        if any(doc_id in relevant for doc_id, _ in ranked[:k]):
            hits += 1
    return hits / len(eval_set)
