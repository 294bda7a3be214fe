import datetime as dt
import math
import json

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from topiclab.corpus import Corpus, Document, Vocabulary
from topiclab.synthetic import planted_lda_corpus

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_corpus(token_lists, days=None, V=None):
    """Corpus over integer token ids; token names are ``t0``, ``t1``, ..."""
    V = V or (max(max(t) for t in token_lists) + 1)
    days = days or [0] * len(token_lists)
    vocab = Vocabulary([f"t{i}" for i in range(V)], np.ones(V, dtype=np.int64))
    docs = [Document(f"d{i:04d}", np.array(t), day) for i, (t, day) in enumerate(zip(token_lists, days))]
    return Corpus(vocab, docs, dt.date(2020, 1, 22))


@pytest.fixture(scope="session")
def small_planted():
    """1,200 documents, V=60, 3 disjoint topics."""
    return planted_lda_corpus(n_docs=1200, V=60, n_topics=3, seed=7, n_days=5)


def write_jsonl(path, corpus, n_users=40):
    """Render a corpus of synthetic ``w###`` tokens as tweet-like JSON lines."""
    start = dt.datetime(2020, 1, 22, 9, 30)
    with open(path, "w", encoding="utf-8") as fh:
        for i, d in enumerate(corpus.documents):
            words = [corpus.vocabulary.tokens[t] for t in d.token_ids]
            text = " ".join(words) + " https://t.co/abc THE"
            ts = (start + dt.timedelta(days=d.day_index)).isoformat() + "Z"
            fh.write(json.dumps({"id": d.id, "text": text, "timestamp": ts, "user": f"u{i % n_users}"}) + "\n")


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if denom == 0 else float(np.linalg.norm(analytic - numeric) / denom)


def etm_gradcheck(seed, lam=0.0, K=3, V=20, H=8, hidden=6, batch=4, margin=1e-5):
    """Worst per-parameter relative error of the ETM objective gradient at one random point.

    The point is redrawn until every displaced pair of topic rows differs by
    more than ``margin`` at every word, keeping clear of TV's kinks.
    """
    from topiclab.etm import EtmModel, Permutation, objective

    rng = np.random.default_rng(seed)
    while True:
        model = EtmModel.initialize(K, V, H, hidden, rng)
        model.t *= 3.0
        perm = Permutation(rng.permutation(K))
        beta = model.beta()
        moved = perm.mapping != np.arange(K)
        if moved.any() and np.abs(beta[moved] - beta[perm.mapping[moved]]).min() > margin:
            break
    bows = rng.integers(0, 4, size=(batch, V)).astype(float)
    bows[:, 0] += 1
    noise = rng.standard_normal((batch, K))
    _, grads, _ = objective(model, bows, noise, perm, lam)
    worst = 0.0
    for name, arr in model.params().items():
        num = central_diff(lambda: objective(model, bows, noise, perm, lam)[0], arr, h=1e-5)
        worst = max(worst, rel_error(grads[name], num))
    return worst


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for p in _set_partitions(rest):
        for i in range(len(p)):
            yield p[:i] + [[first] + p[i]] + p[i + 1 :]
        yield [[first]] + p


def _crp(blocks, n, conc):
    return (conc ** len(blocks) * math.gamma(conc) / math.gamma(conc + n)
            * math.prod(math.factorial(len(b) - 1) for b in blocks))


def canonical_partition(labels):
    """Relabel topic ids by order of first appearance."""
    seen = {}
    return tuple(seen.setdefault(int(l), len(seen)) for l in labels)


def exact_partition_posterior(words, V, alpha, gamma, eta):
    """Posterior over token-to-topic partitions of a single HDP document.

    Sums over seatings of tokens at tables (CRP with ``alpha``) and of tables
    at dishes (CRP with ``gamma``), weighted by the Dirichlet-multinomial
    likelihood of each dish's words.
    """
    n = len(words)
    post = {}
    for tables in _set_partitions(list(range(n))):
        p_tables = _crp(tables, n, alpha)
        for dishes in _set_partitions(list(range(len(tables)))):
            labels = [0] * n
            for k, dish in enumerate(dishes):
                for t in dish:
                    for i in tables[t]:
                        labels[i] = k
            key = canonical_partition(labels)
            lik = 1.0
            for k in set(key):
                c = np.bincount([words[i] for i in range(n) if key[i] == k], minlength=V)
                lik *= (math.gamma(V * eta) / math.gamma(V * eta + c.sum())
                        * math.prod(math.gamma(eta + x) / math.gamma(eta) for x in c))
            post[key] = post.get(key, 0.0) + p_tables * _crp(dishes, len(tables), gamma) * lik
    z = sum(post.values())
    return {k: v / z for k, v in post.items()}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict: ``criterion(n, name, ok, detail)`` then assert ``ok``."""

    def record(n, name, ok, detail):
        line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
