"""Skip-gram word embeddings trained with negative sampling."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import ConfigurationError, FormatError
from .corpus import Corpus, Vocabulary

log = logging.getLogger(__name__)

_EMB_MAGIC = b"TLE1"


@dataclass
class SkipgramConfig:
    dim: int = 300
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    subsample_threshold: float = 1e-3
    seed: int = 0
    power: float = 0.75
    min_learning_rate: float = 1e-4

    def __post_init__(self):
        if self.dim < 1 or self.window < 1 or self.negatives < 1:
            raise ConfigurationError("dim, window and negatives must all be >= 1")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigurationError("epochs must be >= 0 and learning_rate > 0")


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ConfigurationError("embedding matrix must be 2-D")
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigurationError("embedding matrix contains NaN or Inf")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def build_unigram_table(vocab: Vocabulary | np.ndarray, power: float = 0.75) -> np.ndarray:
    """Negative-sampling distribution: P(w) proportional to count(w)**power."""
    counts = vocab.counts if isinstance(vocab, Vocabulary) else np.asarray(vocab)
    if len(counts) == 0:
        raise ConfigurationError("empty vocabulary")
    weights = np.power(counts.astype(np.float64), power)
    return weights / weights.sum()


def keep_probabilities(counts: np.ndarray, threshold: float) -> np.ndarray:
    """Per-word probability of keeping an occurrence under frequent-word subsampling.

    Uses ``(sqrt(f/t) + 1) * t / f`` capped at 1, which is >= 1 whenever the
    relative frequency ``f`` is at most the threshold ``t``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if threshold <= 0:
        return np.ones_like(counts)
    f = counts / counts.sum()
    with np.errstate(divide="ignore"):
        p = (np.sqrt(f / threshold) + 1.0) * threshold / f
    return np.minimum(p, 1.0)


@numba.njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@numba.njit(cache=True)
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@numba.njit(cache=True)
def sgns_loss_grad(center, context, negatives):
    """Negative-sampling loss for one (center, context, negatives) triple.

    loss = -log s(u_o . v_c) - sum_k log s(-u_k . v_c), with s the logistic
    function, v_c the center's input vector, u_o / u_k output vectors.
    Returns ``(loss, d_center, d_context, d_negatives)``.
    """
    score = 0.0
    for j in range(center.shape[0]):
        score += center[j] * context[j]
    loss = -_log_sigmoid(score)
    g = _sigmoid(score) - 1.0
    d_center = g * context
    d_context = g * center
    d_neg = np.empty_like(negatives)
    for k in range(negatives.shape[0]):
        s = 0.0
        for j in range(center.shape[0]):
            s += center[j] * negatives[k, j]
        loss -= _log_sigmoid(-s)
        gk = _sigmoid(s)
        for j in range(center.shape[0]):
            d_center[j] += gk * negatives[k, j]
            d_neg[k, j] = gk * center[j]
    return loss, d_center, d_context, d_neg


@numba.njit(cache=True)
def _sgd_epoch(w_in, w_out, centers, contexts, negs, lr_start, lr_end):
    n = centers.shape[0]
    total = 0.0
    for p in range(n):
        lr = lr_start + (lr_end - lr_start) * (p / max(n - 1, 1))
        c = centers[p]
        o = contexts[p]
        neg_rows = w_out[negs[p]]
        loss, d_c, d_o, d_n = sgns_loss_grad(w_in[c], w_out[o], neg_rows)
        total += loss
        w_in[c] -= lr * d_c
        w_out[o] -= lr * d_o
        for k in range(negs.shape[1]):
            w_out[negs[p, k]] -= lr * d_n[k]
    return total / max(n, 1)


def _epoch_pairs(flat: np.ndarray, doc_of: np.ndarray, keep: np.ndarray | None, window: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(center, context) word-id pairs for one pass, ordered by center position then offset."""
    if keep is not None:
        mask = rng.random(len(flat)) < keep[flat]
        flat, doc_of = flat[mask], doc_of[mask]
    n = len(flat)
    spans = rng.integers(1, window + 1, size=n)
    pos = np.arange(n)
    rows, offs = [], []
    for off in range(-window, window + 1):
        if off == 0:
            continue
        tgt = pos + off
        ok = (abs(off) <= spans) & (tgt >= 0) & (tgt < n)
        ok[ok] &= doc_of[tgt[ok]] == doc_of[ok]
        rows.append(pos[ok])
        offs.append(np.full(int(ok.sum()), off))
    rows = np.concatenate(rows)
    offs = np.concatenate(offs)
    order = np.lexsort((offs, rows))
    rows, offs = rows[order], offs[order]
    return flat[rows], flat[rows + offs]


def train_skipgram(corpus: Corpus, config: SkipgramConfig) -> EmbeddingMatrix:
    """Train skip-gram vectors on ``corpus``; returns the input (center) vectors.

    Single-threaded and deterministic for a given ``config.seed``.
    """
    return train_skipgram_with_losses(corpus, config)[0]


def train_skipgram_with_losses(corpus: Corpus, config: SkipgramConfig) -> tuple[EmbeddingMatrix, list[float]]:
    """As :func:`train_skipgram`, also returning the mean pair loss of every epoch."""
    V, H = corpus.V, config.dim
    if not corpus.documents:
        raise ConfigurationError("cannot train embeddings on an empty corpus")
    if H >= 10 * V:
        log.warning("embedding dim %d >= 10 x vocabulary size %d; embeddings are degenerate", H, V)
    rng = np.random.default_rng(config.seed)
    w_in = rng.uniform(-0.5 / H, 0.5 / H, size=(V, H))
    w_out = np.zeros((V, H))
    if config.epochs == 0:
        return EmbeddingMatrix(w_in), []

    flat = np.concatenate([d.token_ids for d in corpus.documents]).astype(np.int64)
    doc_of = np.repeat(np.arange(len(corpus.documents)), [len(d) for d in corpus.documents])
    counts = np.bincount(flat, minlength=V)
    keep = keep_probabilities(counts, config.subsample_threshold) if config.subsample_threshold > 0 else None
    unigram = build_unigram_table(np.maximum(counts, 0), config.power)
    cdf = np.cumsum(unigram)
    cdf[-1] = 1.0

    lr_hi, lr_lo = config.learning_rate, min(config.min_learning_rate, config.learning_rate)
    losses = []
    for epoch in range(config.epochs):
        centers, contexts = _epoch_pairs(flat, doc_of, keep, config.window, rng)
        negs = np.searchsorted(cdf, rng.random((len(centers), config.negatives)), side="right")
        negs = np.minimum(negs, V - 1)
        frac0, frac1 = epoch / config.epochs, (epoch + 1) / config.epochs
        lr0 = lr_hi - (lr_hi - lr_lo) * frac0
        lr1 = lr_hi - (lr_hi - lr_lo) * frac1
        losses.append(_sgd_epoch(w_in, w_out, centers, contexts, negs, lr0, lr1))
        log.debug("skipgram epoch %d: %d pairs, mean loss %.5f", epoch, len(centers), losses[-1])
    return EmbeddingMatrix(w_in), losses


def cosine_matrix(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    qn = np.linalg.norm(query)
    dots = vectors @ query
    out = np.zeros(len(vectors))
    ok = (norms > 0) & (qn > 0)
    out[ok] = dots[ok] / (norms[ok] * qn)
    return out


def nearest_words(emb: EmbeddingMatrix, word_id: int, k: int) -> list[tuple[int, float]]:
    """The ``k`` most cosine-similar words to ``word_id``, excluding itself.

    Ties are broken by ascending id; zero-norm vectors have cosine 0.
    """
    V = len(emb)
    if not 0 <= word_id < V:
        raise ConfigurationError(f"word id {word_id} out of range")
    if not 0 <= k < V:
        raise ConfigurationError(f"k must be < V ({V})")
    cos = cosine_matrix(emb.vectors, emb.vectors[word_id])
    ids = np.arange(V)
    order = np.lexsort((ids, -cos))
    order = order[order != word_id][:k]
    return [(int(i), float(cos[i])) for i in order]


def save_embeddings(emb: EmbeddingMatrix, path: str | Path) -> None:
    """Binary layout: magic ``TLE1``, u32 V, u32 H, then V*H little-endian float32."""
    V, H = emb.vectors.shape
    Path(path).write_bytes(_EMB_MAGIC + struct.pack("<II", V, H) + emb.vectors.astype("<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    buf = Path(path).read_bytes()
    if buf[:4] != _EMB_MAGIC or len(buf) < 12:
        raise FormatError(f"{path}: not an embedding file")
    V, H = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * V * H:
        raise FormatError(f"{path}: size does not match V={V}, H={H}")
    vecs = np.frombuffer(buf, dtype="<f4", offset=12).reshape(V, H).astype(np.float64)
    return EmbeddingMatrix(vecs)


def export_text(emb: EmbeddingMatrix, vocab: Vocabulary, path: str | Path) -> None:
    """Plain-text ``word v1 ... vH`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok, row in zip(vocab.tokens, emb.vectors.astype(np.float32)):
            fh.write(tok + " " + " ".join(f"{x:.6g}" for x in row) + "\n")
