"""Planted-topic synthetic corpora for recovery experiments."""
from __future__ import annotations

import datetime as dt

import numpy as np

from .corpus import Corpus, Document, Vocabulary


def planted_topics(n_topics: int, V: int, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    """Topics with disjoint contiguous word blocks; weights within a block ~ Dirichlet."""
    block = V // n_topics
    topics = np.zeros((n_topics, V))
    for k in range(n_topics):
        topics[k, k * block : (k + 1) * block] = rng.dirichlet(np.full(block, concentration))
    return topics


def planted_lda_corpus(
    n_docs: int = 5000,
    V: int = 500,
    n_topics: int = 5,
    mean_length: float = 10.0,
    doc_alpha: float = 0.1,
    seed: int = 0,
    n_days: int = 30,
    topics: np.ndarray | None = None,
) -> tuple[Corpus, np.ndarray]:
    """Sample an LDA corpus; returns the corpus and the true topic-word matrix.

    Document lengths are 1 + Poisson(mean_length - 1). Word tokens are named
    ``w000``, ``w001``, ... and ids are their sampled frequency order.
    """
    rng = np.random.default_rng(seed)
    if topics is None:
        topics = planted_topics(n_topics, V, rng)
    lengths = 1 + rng.poisson(mean_length - 1, size=n_docs)
    thetas = rng.dirichlet(np.full(n_topics, doc_alpha), size=n_docs)
    raw = []
    for d in range(n_docs):
        z = rng.choice(n_topics, size=lengths[d], p=thetas[d])
        words = np.array([rng.choice(V, p=topics[k]) for k in z])
        raw.append(words)
    counts = np.bincount(np.concatenate(raw), minlength=V)
    # relabel so ids follow descending frequency like a built vocabulary
    order = np.lexsort((np.arange(V), -counts))
    new_id = np.empty(V, dtype=np.int64)
    new_id[order] = np.arange(V)
    vocab = Vocabulary([f"w{i:03d}" for i in order], counts[order])
    docs = [Document(f"d{d:05d}", new_id[w], int(d % n_days)) for d, w in enumerate(raw)]
    return Corpus(vocab, docs, dt.date(2020, 1, 22)), topics[:, order]


def greedy_topic_match(learned: np.ndarray, true: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Match true topics to distinct learned topics, closest total-variation pairs first.

    Returns the ``(true, learned)`` pairs and their mean TV distance. Needs at
    least as many learned topics as true ones.
    """
    if learned.shape[0] < true.shape[0] or learned.shape[1] != true.shape[1]:
        raise ValueError("need K_learned >= K_true and matching vocabularies")
    tv = 0.5 * np.abs(true[:, None, :] - learned[None, :, :]).sum(axis=2)
    order = np.argsort(tv, axis=None, kind="stable")
    used_t, used_l, pairs = set(), set(), []
    for flat in order:
        i, j = divmod(int(flat), tv.shape[1])
        if i in used_t or j in used_l:
            continue
        used_t.add(i)
        used_l.add(j)
        pairs.append((i, j))
        if len(pairs) == true.shape[0]:
            break
    pairs.sort()
    return pairs, float(np.mean([tv[i, j] for i, j in pairs]))
