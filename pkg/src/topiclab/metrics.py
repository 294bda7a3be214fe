"""Evaluation metrics: held-out perplexity, NPMI coherence, topic gap, and the
word-list contrast test used for human evaluation."""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from . import ConfigurationError, TopicLabError
from .corpus import Corpus, Document

log = logging.getLogger(__name__)

LOG_EPS = 1e-10
TOP_N = 10
LIST_LEN = 5
SAME = "same-topic"
DIFFERENT = "different-topic"


@dataclass
class TopicModelView:
    """What every metric needs from a fitted model: topics plus an ``infer`` function.

    ``topic_prior`` is the mean inferred topic distribution over a reference
    (training) corpus; see :meth:`with_prior`.
    """

    topic_word: np.ndarray
    infer: Callable[[Document], np.ndarray]
    topic_prior: np.ndarray | None = None
    infer_many: Callable[[Sequence[Document]], np.ndarray] | None = None

    def __post_init__(self):
        self.topic_word = np.asarray(self.topic_word, dtype=np.float64)
        rows = self.topic_word.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-6, rtol=0):
            raise ConfigurationError("topic_word rows must each sum to 1")

    @property
    def K(self) -> int:
        return self.topic_word.shape[0]

    @property
    def V(self) -> int:
        return self.topic_word.shape[1]

    def infer_all(self, docs: Sequence[Document]) -> np.ndarray:
        if self.infer_many is not None:
            return np.asarray(self.infer_many(docs))
        return np.array([self.infer(d) for d in docs]).reshape(len(docs), self.K)

    def with_prior(self, corpus: Corpus | Sequence[Document]) -> "TopicModelView":
        docs = corpus.documents if isinstance(corpus, Corpus) else list(corpus)
        if not docs:
            raise ConfigurationError("need at least one document to estimate the topic prior")
        prior = self.infer_all(docs).mean(axis=0)
        return replace(self, topic_prior=prior / prior.sum())


def top_words(topic_word: np.ndarray, n: int = TOP_N) -> np.ndarray:
    """Indices of the ``n`` most probable words per topic; ties go to the lower id."""
    return np.argsort(-topic_word, axis=1, kind="stable")[:, :n]


# -------------------------------------------------------------- perplexity


def log_likelihood_and_perplexity(
    view: TopicModelView, test: Corpus | Sequence[Document]
) -> tuple[float, float]:
    """Plug-in mixture log-likelihood of the test tokens and ``exp(-lnL / n_tok)``.

    Each document's proportions come from ``view.infer``; token ids outside
    the vocabulary are ignored.
    """
    docs = test.documents if isinstance(test, Corpus) else list(test)
    if not docs:
        raise ConfigurationError("empty test corpus")
    thetas = view.infer_all(docs)
    V = view.V
    lnL, n_tok = 0.0, 0
    for theta, doc in zip(thetas, docs):
        ids = doc.token_ids[doc.token_ids < V]
        if len(ids) == 0:
            raise ConfigurationError(f"document {doc.id!r} has no in-vocabulary tokens")
        probs = theta @ view.topic_word[:, ids]
        lnL += float(np.sum(np.log(probs + LOG_EPS)))
        n_tok += len(ids)
    return lnL, math.exp(-lnL / n_tok)


# --------------------------------------------------------------- coherence


class CooccurrenceStats:
    """Document-level presence counts over a test corpus.

    ``pair_freq`` is evaluated on demand from a sparse word-by-document
    presence matrix, or read from an explicit table when one is given.
    """

    def __init__(self, doc_freq: np.ndarray, n_docs: int, presence: sparse.csr_matrix | None = None,
                 pair_table: dict[tuple[int, int], int] | None = None):
        self.doc_freq = np.asarray(doc_freq, dtype=np.int64)
        self.n_docs = int(n_docs)
        self._presence = presence
        self._pairs = pair_table

    @classmethod
    def from_corpus(cls, corpus: Corpus | Sequence[Document], V: int | None = None) -> "CooccurrenceStats":
        docs = corpus.documents if isinstance(corpus, Corpus) else list(corpus)
        if V is None:
            V = corpus.V if isinstance(corpus, Corpus) else int(max(d.token_ids.max() for d in docs)) + 1
        rows = np.concatenate([np.full(len(d), i) for i, d in enumerate(docs)])
        cols = np.concatenate([d.token_ids for d in docs])
        keep = cols < V
        m = sparse.csr_matrix((np.ones(int(keep.sum())), (cols[keep], rows[keep])), shape=(V, len(docs)))
        m.sum_duplicates()
        m.data[:] = 1.0  # presence is binary
        return cls(np.asarray(m.sum(axis=1)).ravel().astype(np.int64), len(docs), presence=m)

    @classmethod
    def from_document_sets(cls, doc_sets: Sequence[set[int]], V: int) -> "CooccurrenceStats":
        df = np.zeros(V, dtype=np.int64)
        pairs: dict[tuple[int, int], int] = {}
        for s in doc_sets:
            for w in s:
                df[w] += 1
            for a, b in itertools.combinations(sorted(s), 2):
                pairs[(a, b)] = pairs.get((a, b), 0) + 1
        return cls(df, len(doc_sets), pair_table=pairs)

    def pair_freq(self, w: int, w2: int) -> int:
        if w == w2:
            return int(self.doc_freq[w])
        if self._pairs is not None:
            return self._pairs.get((min(w, w2), max(w, w2)), 0)
        a, b = self._presence[w], self._presence[w2]
        return int(a.multiply(b).sum())


def npmi(w: int, w2: int, stats: CooccurrenceStats) -> float:
    """Normalized PMI of two words from test-document presence.

    Never co-occurring gives -1; co-occurring in every document gives 1.
    """
    if stats.doc_freq[w] == 0 or stats.doc_freq[w2] == 0:
        raise ConfigurationError(f"word {w if stats.doc_freq[w] == 0 else w2} never occurs in the test set")
    joint = stats.pair_freq(w, w2)
    if joint == 0:
        return -1.0
    n = stats.n_docs
    p_w, p_w2, p_joint = stats.doc_freq[w] / n, stats.doc_freq[w2] / n, joint / n
    if p_joint == 1.0:
        return 1.0
    return math.log(p_joint / (p_w * p_w2)) / -math.log(p_joint)


def topic_coherence(words: Sequence[int], stats: CooccurrenceStats) -> float | None:
    vals = []
    for a, b in itertools.combinations(words, 2):
        if stats.doc_freq[a] == 0 or stats.doc_freq[b] == 0:
            continue
        vals.append(npmi(a, b, stats))
    return sum(vals) / len(vals) if vals else None


def coherence(view: TopicModelView, stats: CooccurrenceStats) -> float:
    """Average over topics of the mean NPMI across the 45 pairs of each topic's top 10 words.

    Pairs with a word absent from the test set are skipped; a topic with no
    scorable pair contributes 0.
    """
    total = 0.0
    for k, words in enumerate(top_words(view.topic_word)):
        c = topic_coherence(words.tolist(), stats)
        if c is None:
            log.warning("topic %d: no top-word pair occurs in the test set; scored 0", k)
            continue
        total += c
    return total / view.K


def topic_gap(view: TopicModelView) -> float:
    """Unique words in the union of every topic's top 10, over 10 * K."""
    if view.V < TOP_N:
        raise ConfigurationError(f"topic gap needs V >= {TOP_N}")
    tops = top_words(view.topic_word)
    return len(np.unique(tops)) / (TOP_N * view.K)


# --------------------------------------------------------------- contrast


@dataclass(frozen=True)
class IntrusionPair:
    pair_id: int
    list_u1: tuple[int, ...]
    list_u2: tuple[int, ...]
    hidden_label: str
    source_topics: tuple[int, int | None]


def generate_intrusion_pairs(
    view: TopicModelView, n_pairs: int, rng: np.random.Generator, max_retries: int = 100
) -> list[IntrusionPair]:
    """Build same/different-topic word-list pairs for annotation.

    Each pair's anchor topic is drawn from ``view.topic_prior`` without
    replacement, so no topic anchors two pairs.
    """
    K = view.K
    if K < 2:
        raise ConfigurationError("need at least 2 topics")
    if n_pairs > K:
        raise ConfigurationError(f"n_pairs={n_pairs} exceeds K={K}: each topic may anchor one pair only")
    if view.topic_prior is None:
        raise ConfigurationError("view has no topic_prior; call with_prior() first")
    tops = top_words(view.topic_word)
    prior = np.asarray(view.topic_prior, dtype=np.float64).copy()
    available = np.ones(K, dtype=bool)
    pairs = []
    for pid in range(n_pairs):
        w = np.where(available, prior, 0.0)
        if w.sum() <= 0:
            w = available.astype(np.float64)
        k = int(rng.choice(K, p=w / w.sum()))
        available[k] = False
        pick = rng.choice(TOP_N, size=LIST_LEN, replace=False)
        u1 = tops[k][np.sort(pick)]
        if rng.random() < 0.5:
            rest = np.setdiff1d(np.arange(TOP_N), pick)
            pairs.append(IntrusionPair(pid, tuple(map(int, u1)), tuple(map(int, tops[k][rest])), SAME, (k, None)))
            continue
        for _ in range(max_retries):
            l = int(rng.choice([x for x in range(K) if x != k]))
            pool = [x for x in tops[l] if x not in set(u1.tolist())]
            if len(pool) >= LIST_LEN:
                break
        else:
            raise TopicLabError(f"pair {pid}: no topic other than {k} has {LIST_LEN} words outside U1")
        sel = np.sort(rng.choice(len(pool), size=LIST_LEN, replace=False))
        u2 = tuple(int(pool[i]) for i in sel)
        pairs.append(IntrusionPair(pid, tuple(map(int, u1)), u2, DIFFERENT, (k, l)))
    return pairs


def write_pairs(pairs: Sequence[IntrusionPair], tokens: Sequence[str], pairs_path, answers_path) -> None:
    """Annotator file ``pair_id,u1_words,u2_words`` and the hidden ``pair_id,label`` key."""
    with open(pairs_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "u1_words", "u2_words"])
        for p in pairs:
            w.writerow([p.pair_id, ";".join(tokens[i] for i in p.list_u1), ";".join(tokens[i] for i in p.list_u2)])
    write_labels({p.pair_id: p.hidden_label for p in pairs}, answers_path)


def write_labels(labels: dict[int, str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "label"])
        for pid in sorted(labels):
            w.writerow([pid, labels[pid]])


_LABEL_ALIASES = {"same": SAME, SAME: SAME, "different": DIFFERENT, DIFFERENT: DIFFERENT}


def read_labels(path) -> dict[int, str]:
    labels: dict[int, str] = {}
    dupes = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pid = int(row["pair_id"])
            lab = row["label"].strip().lower()
            if lab not in _LABEL_ALIASES:
                raise TopicLabError(f"{path}: pair {pid} has unknown label {row['label']!r}")
            if pid in labels:
                dupes.append(pid)
            labels[pid] = _LABEL_ALIASES[lab]
    if dupes:
        raise TopicLabError(f"{path}: duplicate pair_id(s) {sorted(set(dupes))}")
    return labels


def contrast_score(answer_file, annotation_file) -> float:
    """Fraction of annotated pairs whose label matches the hidden answer."""
    answers = read_labels(answer_file)
    notes = read_labels(annotation_file)
    missing = sorted(set(answers) ^ set(notes))
    if missing:
        raise TopicLabError(f"pair ids not covered by both files: {missing}")
    if not answers:
        raise TopicLabError("no pairs to score")
    return sum(answers[p] == notes[p] for p in answers) / len(answers)


# ------------------------------------------------------------------ report


def evaluate(view: TopicModelView, test: Corpus) -> dict[str, float]:
    _, perp = log_likelihood_and_perplexity(view, test)
    stats = CooccurrenceStats.from_corpus(test, view.V)
    return {"perplexity": perp, "coherence": coherence(view, stats), "topic_gap": topic_gap(view)}


def _sig4(x: float) -> str:
    return f"{x:.4g}"


def write_report(rows: Sequence[tuple[str, dict[str, float]]], path: str | Path) -> None:
    """Eval report ``model,perplexity,coherence,topic_gap[,contrast_score]``; 4 significant digits."""
    with_cs = any("contrast_score" in r for _, r in rows)
    cols = ["perplexity", "coherence", "topic_gap"] + (["contrast_score"] if with_cs else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + cols)
        for name, r in rows:
            w.writerow([name] + [_sig4(r[c]) if c in r else "" for c in cols])
