"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py``; the verdicts are also
listed in the "acceptance criteria" section of the terminal summary.
"""
import math
import time
from collections import Counter
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare

from topiclab.cli import manifest_path, run
from topiclab.corpus import split_corpus
from topiclab.embeddings import SkipgramConfig, sgns_loss_grad, train_skipgram
from topiclab.etm import EtmTrainConfig, etm_view, train_etm
from topiclab.hdp import HdpConfig, hdp_view, gibbs_sweep, init_state, train_hdp
from topiclab.metrics import (DIFFERENT, SAME, CooccurrenceStats, TopicModelView, contrast_score, evaluate,
                              generate_intrusion_pairs, log_likelihood_and_perplexity, npmi, top_words,
                              topic_gap, write_labels)
from topiclab.synthetic import greedy_topic_match, planted_lda_corpus
from topiclab.trends import load_meta_map, parse_meta_map, prevalence_series, write_series

from conftest import (canonical_partition, central_diff, etm_gradcheck, exact_partition_posterior,
                      make_corpus, rel_error, write_jsonl)

GOLDEN = Path(__file__).parent / "data" / "golden_trends"
SEEDS = range(5)

# shared desk-scale ETM recipe for the synthetic corpus (see README)
ETM_RECIPE = dict(H=50, hidden=200, learning_rate=0.01, batch_size=200, epochs=60, eval_every=100,
                  kl_warmup_steps=2000)
W2V_EPOCHS = 10


@lru_cache(maxsize=None)
def planted():
    """5,000 documents, V=500, 5 disjoint true topics, mean length 10; 10% held out."""
    corpus, true = planted_lda_corpus(n_docs=5000, V=500, n_topics=5, mean_length=10, seed=1)
    train, test = split_corpus(corpus, 0.1, 0)
    return train, test, true


@lru_cache(maxsize=None)
def w2v(seed):
    train, _, _ = planted()
    return train_skipgram(train, SkipgramConfig(dim=ETM_RECIPE["H"], epochs=W2V_EPOCHS, seed=seed))


@lru_cache(maxsize=None)
def etm_run(K, seed, lam, pretrained):
    train, test, _ = planted()
    cfg = EtmTrainConfig(K=K, seed=seed, lambda_td=lam, pretrained_embeddings=w2v(seed) if pretrained else None,
                         **ETM_RECIPE)
    model, _ = train_etm(train, cfg, test)
    return model, evaluate(etm_view(model), test)


def uniform_view(K, V):
    return TopicModelView(np.full((K, V), 1.0 / V), lambda d: np.full(K, 1.0 / K))


def block_view(K, V, shared):
    """Topics whose top 10 words are identical (shared=True) or pairwise disjoint."""
    tw = np.full((K, V), 1e-3)
    for k in range(K):
        lo = 0 if shared else 10 * k
        tw[k, lo : lo + 10] = 1.0 + np.arange(10)[::-1] * 0.01
    return TopicModelView(tw / tw.sum(axis=1, keepdims=True), lambda d: np.full(K, 1.0 / K))


def test_criterion_1_metric_exactness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = {}
    # the 1e-10 log guard shifts a uniform model's perplexity by about V * 1e-10 relative
    for V in (2, 5, 8):
        test = make_corpus([list(rng.integers(0, V, size=rng.integers(1, 20))) for _ in range(40)], V=V)
        perp = log_likelihood_and_perplexity(uniform_view(4, V), test)[1]
        checks[f"uniform perplexity V={V}"] = abs(perp - V) / V <= 1e-9
    for K in (1, 3, 7):
        checks[f"gap shared K={K}"] = topic_gap(block_view(K, 80, True)) == 1 / K
        checks[f"gap disjoint K={K}"] = topic_gap(block_view(K, 80, False)) == 1.0

    def stats(sets, V=2):
        return CooccurrenceStats.from_corpus(make_corpus([sorted(s) for s in sets], V=V), V)

    checks["npmi perfect"] = npmi(0, 1, stats([{0, 1}, {0, 1}, {0, 1}])) == 1.0
    checks["npmi perfect partial"] = abs(npmi(0, 1, stats([{0, 1}, {2}], V=3)) - 1.0) <= 1e-12
    checks["npmi independent"] = abs(npmi(0, 1, stats([{0, 1}, {0}, {1}, {2}], V=3))) <= 1e-12
    checks["npmi disjoint"] = npmi(0, 1, stats([{0}, {1}])) == -1.0
    four = npmi(0, 1, stats([{0, 1}, {0, 1}, {0}, {1}]))
    checks["npmi 4-doc"] = abs(four - math.log(8 / 9) / math.log(2)) <= 1e-12
    elapsed = time.perf_counter() - t0
    failed = [k for k, ok in checks.items() if not ok]
    criterion(1, "metric exactness", not failed and elapsed < 1.0,
              f"{len(checks) - len(failed)}/{len(checks)} exact checks, npmi(4-doc)={four:.6f}, {elapsed:.2f}s"
              + (f", failed {failed}" if failed else ""))


def test_criterion_2_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    sgns = []
    for _ in range(10):
        c, o, n = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(5, 8))
        _, dc, do, dn = sgns_loss_grad(c, o, n)
        sgns.append(max(rel_error(g, central_diff(lambda: sgns_loss_grad(c, o, n)[0], x)) for x, g in
                        ((c, dc), (o, do), (n, dn))))
    elbo_err = [etm_gradcheck(seed, lam=0.0, K=3, V=20, H=8) for seed in range(10)]
    full_err = [etm_gradcheck(100 + seed, lam=1.0, K=3, V=20, H=8) for seed in range(10)]
    worst = max(max(sgns), max(elbo_err), max(full_err))
    elapsed = time.perf_counter() - t0
    criterion(2, "gradient fidelity", worst <= 1e-4 and elapsed < 10,
              f"max rel. error SGNS {max(sgns):.1e}, ELBO {max(elbo_err):.1e}, ELBO+J {max(full_err):.1e} "
              f"over 10 points each, {elapsed:.1f}s")


def test_criterion_3_gibbs_correctness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    V = 20
    corpus = make_corpus([list(rng.integers(0, V, size=rng.integers(1, 15))) for _ in range(50)], V=V)
    lens = np.array([len(d) for d in corpus.documents])
    state = init_state(corpus, HdpConfig(alpha=1.0, gamma=1.0, eta=0.1, iterations=2, burn_in=1), rng)
    violations = 0
    for _ in range(200):
        gibbs_sweep(state, rng)
        try:
            state.check()
        except Exception:
            violations += 1
        if not (np.array_equal(state.n_dk.sum(axis=1), lens)
                and np.array_equal(state.n_kw.sum(axis=1), state.n_k) and np.all(state.n_k > 0)):
            violations += 1

    words, alpha, gamma, eta = [0, 0, 1], 1.0, 1.5, 0.5
    exact = exact_partition_posterior(words, 2, alpha, gamma, eta)
    rng = np.random.default_rng(30)
    s = init_state(make_corpus([words], V=2), HdpConfig(alpha=alpha, gamma=gamma, eta=eta, iterations=2, burn_in=1),
                   rng)
    counts = Counter()
    for _ in range(10**5):
        gibbs_sweep(s, rng)
        counts[canonical_partition(s.z)] += 1
    keys = sorted(exact)
    obs = np.array([counts[k] for k in keys])
    p = chisquare(obs, np.array([exact[k] for k in keys]) * obs.sum()).pvalue
    elapsed = time.perf_counter() - t0
    criterion(3, "Gibbs correctness", violations == 0 and p > 0.01 and elapsed < 120,
              f"{violations} invariant violations in 200 sweeps; partition chi-square p={p:.3f} over 1e5 sweeps, "
              f"{elapsed:.0f}s")


def test_criterion_4_topic_recovery(criterion):
    t0 = time.perf_counter()
    train, test, true = planted()
    V = train.V
    model, trace, _ = train_hdp(train, HdpConfig(alpha=1.0, gamma=1.0, eta=0.1, iterations=300, burn_in=100,
                                                 eval_every=50, seed=0))
    mode_k = Counter(trace.k_active[100:]).most_common(1)[0][0]
    hdp_perp = log_likelihood_and_perplexity(hdp_view(model), test)[1]

    etm_model, ev = etm_run(5, 0, 1.0, True)
    _, tv = greedy_topic_match(etm_model.beta(), true)
    elapsed = time.perf_counter() - t0
    ok = 4 <= mode_k <= 7 and tv <= 0.3 and hdp_perp < 0.5 * V and ev["perplexity"] < 0.5 * V and elapsed < 900
    criterion(4, "topic recovery", ok,
              f"HDP modal K={mode_k}, perplexity {hdp_perp:.1f}; ETM+W2V+TD greedy TV {tv:.3f}, "
              f"perplexity {ev['perplexity']:.1f}; bound {0.5 * V:.0f}; {elapsed:.0f}s")


def test_criterion_5_regularizer_effect(criterion):
    t0 = time.perf_counter()
    base = [etm_run(10, s, 0.0, True)[1] for s in SEEDS]
    td = [etm_run(10, s, 1.0, True)[1] for s in SEEDS]
    gaps = [(b["topic_gap"], t["topic_gap"]) for b, t in zip(base, td)]
    wins = sum(t > b for b, t in gaps)
    mean_b, mean_t = np.mean([g[0] for g in gaps]), np.mean([g[1] for g in gaps])
    perp_b = np.mean([b["perplexity"] for b in base])
    perp_t = np.mean([t["perplexity"] for t in td])
    elapsed = time.perf_counter() - t0
    criterion(5, "regularizer effect", mean_t > mean_b and wins >= 4 and perp_t <= perp_b and elapsed < 1800,
              f"K=10 topic gap {mean_b:.3f} -> {mean_t:.3f} with lambda=1, higher in {wins}/5 seeds; "
              f"perplexity {perp_b:.1f} -> {perp_t:.1f}; {elapsed:.0f}s")


def test_criterion_6_word2vec_effect(criterion):
    t0 = time.perf_counter()
    plain = np.mean([etm_run(5, s, 0.0, False)[1]["coherence"] for s in SEEDS])
    init = np.mean([etm_run(5, s, 0.0, True)[1]["coherence"] for s in SEEDS])
    elapsed = time.perf_counter() - t0
    criterion(6, "word2vec initialization", init >= plain and elapsed < 1800,
              f"mean coherence ETM {plain:.3f}, ETM+W2V {init:.3f} over 5 seeds; {elapsed:.0f}s")


def test_criterion_7_intrusion_harness(criterion, tmp_path):
    K, V = 10, 200
    rng = np.random.default_rng(7)
    tw = rng.dirichlet(np.full(V, 0.2), size=K)
    view = TopicModelView(tw, lambda d: np.full(K, 1.0 / K), topic_prior=rng.dirichlet(np.ones(K)))
    tops = top_words(tw)
    bad = 0
    for _ in range(1000):
        pairs = generate_intrusion_pairs(view, K, rng)
        anchors = [p.source_topics[0] for p in pairs]
        bad += len(set(anchors)) != len(anchors)
        for p in pairs:
            k, l = p.source_topics
            bad += bool(set(p.list_u1) & set(p.list_u2)) or len(p.list_u1) != 5 or len(p.list_u2) != 5
            bad += not set(p.list_u1) <= set(tops[k].tolist())
            bad += not set(p.list_u2) <= set(tops[l if p.hidden_label == DIFFERENT else k].tolist())
    truth = {i: SAME if i % 3 else DIFFERENT for i in range(100)}
    flipped = {i: (lab if i >= 12 else (SAME if lab == DIFFERENT else DIFFERENT)) for i, lab in truth.items()}
    write_labels(truth, tmp_path / "answers.csv")
    write_labels(truth, tmp_path / "all_correct.csv")
    write_labels(flipped, tmp_path / "eighty_eight.csv")
    cs_all = contrast_score(tmp_path / "answers.csv", tmp_path / "all_correct.csv")
    cs_88 = contrast_score(tmp_path / "answers.csv", tmp_path / "eighty_eight.csv")
    criterion(7, "intrusion harness", bad == 0 and cs_all == 1.0 and cs_88 == 0.88,
              f"{bad} constraint violations in 1000 batches of {K} pairs; contrast scores {cs_all}, {cs_88}")


def _pipeline(root, jsonl):
    root.mkdir()
    corp, meta = root / "corp", root / "meta.txt"
    meta.write_text("0 = alpha\n1 = beta\n2 = miscellaneous\n3 = miscellaneous\n")
    steps = [
        ["preprocess", "--input", str(jsonl), "--output", str(corp), "--seed", "5"],
        ["train-etm", "--input", str(corp / "train.tlc"), "--test", str(corp / "test.tlc"),
         "--output", str(root / "etm.tlm"), "--topics", "4", "--embed-dim", "16", "--hidden-dim", "32",
         "--epochs", "8", "--batch-size", "100", "--eval-every", "10", "--lambda-td", "1", "--seed", "5"],
        ["eval", "--model", str(root / "etm.tlm"), "--test", str(corp / "test.tlc"), "--out", str(root / "report.csv"),
         "--seed", "5"],
        ["trends", "--model", str(root / "etm.tlm"), "--input", str(corp / "test.tlc"), "--meta-map", str(meta),
         "--output", str(root / "trends"), "--seed", "5"],
    ]
    codes = [run(s) for s in steps]
    files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
             if p.is_file() and not p.name.endswith(".manifest.json")}
    manifests = [p for p in root.rglob("*.manifest.json")]
    return codes, files, manifests


def test_criterion_8_pipeline_determinism(criterion, tmp_path):
    corpus, _ = planted_lda_corpus(n_docs=800, V=80, n_topics=4, seed=8, n_days=6)
    write_jsonl(tmp_path / "tweets.jsonl", corpus)
    codes_a, a, man_a = _pipeline(tmp_path / "a", tmp_path / "tweets.jsonl")
    codes_b, b, man_b = _pipeline(tmp_path / "b", tmp_path / "tweets.jsonl")
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = codes_a == codes_b == [0, 0, 0, 0] and not differ and len(a) >= 9 and len(man_a) == len(man_b) == 4
    criterion(8, "pipeline determinism", ok,
              f"{len(a)} artifacts compared, {len(differ)} differ{' ' + str(differ) if differ else ''}; "
              f"{len(man_a)} manifests per run")


def test_criterion_9_trend_conservation(criterion, tmp_path):
    corpus, _ = planted_lda_corpus(n_docs=600, V=60, n_topics=3, seed=9, n_days=12)
    train, test = split_corpus(corpus, 0.2, 0)
    model, _, _ = train_hdp(train, HdpConfig(alpha=1.0, gamma=1.0, eta=0.1, iterations=30, burn_in=10,
                                             eval_every=10, seed=0))
    view = hdp_view(model)
    labels = ["health", "economy", "miscellaneous"]
    mm = parse_meta_map("".join(f"{k} = {labels[k % 3]}\n" for k in range(view.K)), view.K)
    worst = 0.0
    for c in (test, corpus):
        series = prevalence_series(view, c, mm)
        totals = np.sum([[y for _, y in s.points] for s in series], axis=0)
        worst = max(worst, float(np.max(np.abs(totals - 1.0))))

    golden = make_corpus([[0], [1], [2], [3]], days=[0, 0, 2, 5])
    thetas = {"d0000": [0.2, 0.3, 0.5], "d0001": [0.6, 0.1, 0.3], "d0002": [1 / 3, 1 / 3, 1 / 3],
              "d0003": [0.015594, 0.5, 0.484406]}
    gview = TopicModelView(np.full((3, 5), 0.2), lambda d: np.asarray(thetas[d.id]))
    paths = write_series(prevalence_series(gview, golden, load_meta_map(GOLDEN / "meta.txt", 3)), tmp_path)
    same = all(p.read_bytes() == (GOLDEN / p.name).read_bytes() for p in paths) and len(paths) == 2
    criterion(9, "trend conservation", worst <= 1e-6 and same,
              f"max |sum of meta-topic means - 1| = {worst:.1e} over {view.K} topics; golden CSV "
              f"{'byte-identical' if same else 'MISMATCH'}")
