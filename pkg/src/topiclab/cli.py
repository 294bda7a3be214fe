"""Command-line entry point: ``topiclab <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import (ConfigurationError, FormatError, IngestError, TopicLabError, TrainingError, __version__)
from . import corpus as corpus_mod
from . import embeddings, etm, hdp, metrics, trends

log = logging.getLogger("topiclab")

MODEL_MAGIC = b"TLM1"
DEFAULT_FOLD_IN_ITERS = 20
DEFAULT_FOLD_IN_BURN_IN = 10


# -------------------------------------------------------------- manifests


def _version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str]
    outputs: list[str]
    version: str
    duration_s: float

    def write(self, artifact: str | Path) -> Path:
        path = Path(str(artifact) + ".manifest.json")
        atomic_write_text(path, json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n")
        return path


def manifest_path(artifact: str | Path) -> Path:
    return Path(str(artifact) + ".manifest.json")


# ------------------------------------------------------------------ models


def load_model(path: str | Path):
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC or len(buf) < 12:
        raise FormatError(f"{path}: not a model file")
    kind = int.from_bytes(buf[8:12], "little")
    if kind == etm.KIND_ETM:
        return etm.read_etm(buf, path)
    if kind == hdp.KIND_HDP:
        return hdp.read_hdp(buf, path)
    raise FormatError(f"{path}: unknown model kind {kind}")


def model_view(model, seed: int = 0, fold_in_iters: int = DEFAULT_FOLD_IN_ITERS,
               fold_in_burn_in: int = DEFAULT_FOLD_IN_BURN_IN) -> metrics.TopicModelView:
    if isinstance(model, etm.EtmModel):
        return etm.etm_view(model)
    return hdp.hdp_view(model, fold_in_iters, fold_in_burn_in, seed)


# ------------------------------------------------------------- grid search


HIGHER_IS_BETTER = {"perplexity": False, "coherence": True, "topic_gap": True}

ETM_KEYS = {
    "topics": ("K", int), "embed-dim": ("H", int), "hidden-dim": ("hidden", int),
    "lr": ("learning_rate", float), "batch-size": ("batch_size", int), "epochs": ("epochs", int),
    "lambda-td": ("lambda_td", float), "kl-warmup": ("kl_warmup_steps", int),
    "eval-every": ("eval_every", int), "grad-clip": ("grad_clip", float),
}
W2V_KEYS = {
    "w2v-epochs": ("epochs", int), "w2v-window": ("window", int), "w2v-negatives": ("negatives", int),
    "w2v-lr": ("learning_rate", float), "w2v-subsample": ("subsample_threshold", float),
}
HDP_KEYS = {
    "alpha": ("alpha", float), "gamma": ("gamma", float), "eta": ("eta", float),
    "iterations": ("iterations", int), "burn-in": ("burn_in", int), "eval-every": ("eval_every", int),
}


@dataclass
class GridSpec:
    kind: str
    values: dict[str, list[str]]
    max_configs: int = 256
    preference: str = "copeland"

    def __post_init__(self):
        allowed = (ETM_KEYS | W2V_KEYS) if self.kind == "etm" else HDP_KEYS
        unknown = sorted(set(self.values) - set(allowed))
        if unknown:
            raise ConfigurationError(f"unknown {self.kind} grid keys: {unknown}")
        if not self.values or any(not v for v in self.values.values()):
            raise ConfigurationError("grid must have at least one value per key")
        if self.size > self.max_configs:
            raise ConfigurationError(f"grid has {self.size} configurations, limit is {self.max_configs}")

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.values.values())

    def configurations(self) -> list[dict[str, str]]:
        keys = list(self.values)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.values[k] for k in keys))]


def parse_grid_file(text: str, kind: str, max_configs: int = 256) -> GridSpec:
    """``key = v1, v2, ...`` per line; ``#`` comments."""
    values: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rest = line.partition("=")
        if not sep:
            raise ConfigurationError(f"grid line {lineno}: expected 'key = v1, v2'")
        values[key.strip()] = [v.strip() for v in rest.split(",") if v.strip()]
    return GridSpec(kind, values, max_configs)


def pairwise_wins(a: dict[str, float], b: dict[str, float]) -> tuple[int, int]:
    """Number of metrics on which ``a`` beats ``b`` and vice versa."""
    wa = wb = 0
    for m, higher in HIGHER_IS_BETTER.items():
        if a[m] == b[m]:
            continue
        if (a[m] > b[m]) == higher:
            wa += 1
        else:
            wb += 1
    return wa, wb


def copeland_scores(results: Sequence[dict[str, float]]) -> list[int]:
    """Copeland score per configuration: pairwise majority wins minus losses."""
    scores = [0] * len(results)
    for i, j in itertools.combinations(range(len(results)), 2):
        wi, wj = pairwise_wins(results[i], results[j])
        if wi > wj:
            scores[i] += 1
            scores[j] -= 1
        elif wj > wi:
            scores[j] += 1
            scores[i] -= 1
    return scores


def select_winner(results: Sequence[dict[str, float]], labels: Sequence[str] | None = None) -> int:
    """Index of the preferred configuration; ties go to lower perplexity, then label."""
    if not results:
        raise ConfigurationError("no successful configuration to select from")
    scores = copeland_scores(results)
    labels = labels or [""] * len(results)
    return min(range(len(results)), key=lambda i: (-scores[i], results[i]["perplexity"], labels[i]))


def _etm_config(cfg: dict[str, str], train, seed: int, base: dict | None = None):
    kw = dict(base or {})
    w2v = {}
    for key, val in cfg.items():
        if key in ETM_KEYS:
            name, typ = ETM_KEYS[key]
            kw[name] = typ(val)
        else:
            name, typ = W2V_KEYS[key]
            w2v[name] = typ(val)
    kw["seed"] = seed
    if w2v.get("epochs", 0) > 0:
        sg = embeddings.SkipgramConfig(dim=kw.get("H", 300), seed=seed, **w2v)
        kw["pretrained_embeddings"] = embeddings.train_skipgram(train, sg)
    return etm.EtmTrainConfig(**kw)


def train_from_grid_row(kind: str, cfg: dict[str, str], train, test, seed: int, base: dict | None = None):
    if kind == "etm":
        model, _ = etm.train_etm(train, _etm_config(cfg, train, seed, base), test)
        return model
    kw = dict(base or {})
    for key, val in cfg.items():
        name, typ = HDP_KEYS[key]
        kw[name] = typ(val)
    model, _, _ = hdp.train_hdp(train, hdp.HdpConfig(seed=seed, **kw), test)
    return model


def grid_search(spec: GridSpec, train, test, seed: int, base: dict | None = None):
    """Train and score every configuration; returns ``(winner_row, rows)``.

    A failing configuration is recorded with ``status`` set to the error and
    excluded from selection.
    """
    rows = []
    for i, cfg in enumerate(spec.configurations()):
        row = {"config_id": i, **cfg}
        try:
            model = train_from_grid_row(spec.kind, cfg, train, test, seed, base)
            row.update(metrics.evaluate(model_view(model, seed), test))
            row["status"] = "ok"
        except (TopicLabError, ValueError, FloatingPointError) as exc:
            log.warning("configuration %d failed: %s", i, exc)
            row["status"] = f"failed: {exc}"
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    scores = copeland_scores(ok)
    for r, s in zip(ok, scores):
        r["copeland"] = s
    if not ok:
        return None, rows
    labels = [json.dumps({k: r[k] for k in spec.values}, sort_keys=True) for r in ok]
    return ok[select_winner(ok, labels)], rows


def write_grid_results(rows, keys: Sequence[str], path: Path, winner_id: int | None) -> None:
    cols = ["config_id", *keys, "perplexity", "coherence", "topic_gap", "copeland", "winner", "status"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            out = []
            for c in cols:
                if c == "winner":
                    out.append(int(r["config_id"] == winner_id))
                elif c in ("perplexity", "coherence", "topic_gap") and c in r:
                    out.append(f"{r[c]:.4g}")
                else:
                    out.append(r.get(c, ""))
            w.writerow(out)


# ----------------------------------------------------------------- commands


def _cmd_preprocess(a) -> tuple[dict, list[Path]]:
    raws = corpus_mod.read_jsonl(a.input)
    stop = corpus_mod.load_stopwords(a.stopwords)
    lemm = corpus_mod.load_lemmas(a.lemmas) if a.lemmas else None
    full = corpus_mod.build_corpus(raws, stop, lemm, a.min_token_len, a.min_count)
    train, test = corpus_mod.split_corpus(full, a.test_fraction, a.seed)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_corpus(train, out / "train.tlc")
    corpus_mod.save_corpus(test, out / "test.tlc")
    kept = {d.id for d in full.documents}
    stats = {
        "train_documents": len(train),
        "test_documents": len(test),
        "users": len({r.author_id for r in raws if r.id in kept}),
        "vocabulary_size": full.V,
        "tokens_per_document": full.n_tokens / len(full),
        "start_date": full.start_date.isoformat(),
        "dropped_documents": len(raws) - len(full),
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cfg = {"min_token_len": a.min_token_len, "min_count": a.min_count, "test_fraction": a.test_fraction,
           "stopwords": a.stopwords or "<bundled>", "lemmas": a.lemmas or "<default>"}
    return cfg, [out / "train.tlc", out / "test.tlc", out / "stats.json"]


def _cmd_train_w2v(a):
    c = corpus_mod.load_corpus(a.input)
    sg = embeddings.SkipgramConfig(dim=a.embed_dim, window=a.window, negatives=a.negatives,
                                   epochs=a.epochs, learning_rate=a.lr,
                                   subsample_threshold=a.subsample, seed=a.seed)
    emb = embeddings.train_skipgram(c, sg)
    embeddings.save_embeddings(emb, a.output)
    outs = [Path(a.output)]
    if a.text_output:
        embeddings.export_text(emb, c.vocabulary, a.text_output)
        outs.append(Path(a.text_output))
    return {k: v for k, v in sg.__dict__.items()}, outs


def _cmd_train_etm(a):
    train = corpus_mod.load_corpus(a.input)
    test = corpus_mod.load_corpus(a.test) if a.test else None
    pre = embeddings.load_embeddings(a.pretrained_embeddings) if a.pretrained_embeddings else None
    cfg = etm.EtmTrainConfig(
        K=a.topics, H=a.embed_dim, hidden=a.hidden_dim, learning_rate=a.lr, batch_size=a.batch_size,
        epochs=a.epochs, lambda_td=a.lambda_td, kl_warmup_steps=a.kl_warmup, pretrained_embeddings=pre,
        fine_tune_embeddings=a.fine_tune_embeddings, seed=a.seed, eval_every=a.eval_every,
        grad_clip=a.grad_clip, permutation_schedule=a.permutation_schedule,
    )
    model, train_log = etm.train_etm(train, cfg, test)
    etm.save_etm(model, a.output)
    log_path = Path(str(a.output) + ".log.csv")
    train_log.write_csv(log_path)
    snap = cfg.snapshot()
    snap["best_iteration"] = train_log.best_iteration
    return snap, [Path(a.output), log_path]


def _cmd_train_hdp(a):
    train = corpus_mod.load_corpus(a.input)
    test = corpus_mod.load_corpus(a.test) if a.test else None
    cfg = hdp.HdpConfig(alpha=a.alpha, gamma=a.gamma, eta=a.eta, iterations=a.iterations,
                        burn_in=a.burn_in, eval_every=a.eval_every, seed=a.seed,
                        fold_in_iters=a.fold_in_iters, fold_in_burn_in=a.fold_in_burn_in)
    model, trace, _ = hdp.train_hdp(train, cfg, test)
    hdp.save_hdp(model, a.output)
    trace_path = Path(str(a.output) + ".trace.csv")
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "k_active", "score"])
        for sweep, k, score in trace.checkpoints:
            w.writerow([sweep, k, repr(score)])
    snap = dict(cfg.__dict__, best_sweep=trace.best_sweep, criterion=trace.criterion, k_active=model.K)
    return snap, [Path(a.output), trace_path]


def _cmd_eval(a):
    model = load_model(a.model)
    test = corpus_mod.load_corpus(a.test)
    view = model_view(model, a.seed, a.fold_in_iters, a.fold_in_burn_in)
    row = metrics.evaluate(view, test)
    if a.annotations:
        row["contrast_score"] = metrics.contrast_score(a.answers, a.annotations)
    name = a.name or Path(a.model).stem
    metrics.write_report([(name, row)], a.output)
    return {"name": name, "fold_in_iters": a.fold_in_iters, "fold_in_burn_in": a.fold_in_burn_in}, [Path(a.output)]


def _cmd_intrusion_gen(a):
    model = load_model(a.model)
    ref = corpus_mod.load_corpus(a.input)
    view = model_view(model, a.seed, a.fold_in_iters, a.fold_in_burn_in).with_prior(ref)
    pairs = metrics.generate_intrusion_pairs(view, a.pairs, np.random.default_rng(a.seed))
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_pairs(pairs, ref.vocabulary.tokens, out / "pairs.csv", out / "answers.csv")
    return {"pairs": a.pairs}, [out / "pairs.csv", out / "answers.csv"]


def _cmd_intrusion_score(a):
    score = metrics.contrast_score(a.answers, a.annotations)
    print(f"{score:.4g}")
    outs = []
    if a.output:
        Path(a.output).write_text(f"contrast_score\n{score:.4g}\n", encoding="utf-8")
        outs.append(Path(a.output))
    return {"contrast_score": score}, outs


def _cmd_trends(a):
    model = load_model(a.model)
    c = corpus_mod.load_corpus(a.input)
    if a.full_corpus:
        extra = corpus_mod.load_corpus(a.full_corpus)
        if extra.vocabulary != c.vocabulary:
            raise ConfigurationError("--full-corpus split has a different vocabulary")
        start = min(c.start_date, extra.start_date)
        docs = [corpus_mod.Document(d.id, d.token_ids, d.day_index + (s.start_date - start).days)
                for s in (c, extra) for d in s.documents]
        c = corpus_mod.Corpus(c.vocabulary, docs, start)
    view = model_view(model, a.seed, a.fold_in_iters, a.fold_in_burn_in)
    mm = trends.load_meta_map(a.meta_map, view.K)
    paths = trends.write_series(trends.prevalence_series(view, c, mm), a.output)
    return {"labels": mm.names}, paths


def _cmd_grid(a):
    train = corpus_mod.load_corpus(a.input)
    test = corpus_mod.load_corpus(a.test)
    spec = parse_grid_file(Path(a.grid_file).read_text("utf-8"), a.model_kind, a.max_configs)
    winner, rows = grid_search(spec, train, test, a.seed)
    write_grid_results(rows, list(spec.values), Path(a.output), winner["config_id"] if winner else None)
    if winner is None:
        raise TrainingError("every grid configuration failed")
    print(json.dumps({k: winner[k] for k in spec.values}, sort_keys=True))
    return {"grid": spec.values, "kind": spec.kind, "winner": winner["config_id"]}, [Path(a.output)]


COMMANDS = {
    "preprocess": _cmd_preprocess,
    "train-w2v": _cmd_train_w2v,
    "train-etm": _cmd_train_etm,
    "train-hdp": _cmd_train_hdp,
    "eval": _cmd_eval,
    "intrusion-gen": _cmd_intrusion_gen,
    "intrusion-score": _cmd_intrusion_score,
    "trends": _cmd_trends,
    "grid": _cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topiclab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def seed(sp):
        sp.add_argument("--seed", type=int, required=True)

    def fold(sp):
        sp.add_argument("--fold-in-iters", type=int, default=DEFAULT_FOLD_IN_ITERS)
        sp.add_argument("--fold-in-burn-in", type=int, default=DEFAULT_FOLD_IN_BURN_IN)

    sp = sub.add_parser("preprocess", help="tokenize a JSON-lines corpus and split it")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True, help="output directory")
    sp.add_argument("--stopwords")
    sp.add_argument("--lemmas")
    sp.add_argument("--min-token-len", type=int, default=corpus_mod.DEFAULT_MIN_LEN)
    sp.add_argument("--min-count", type=int, default=corpus_mod.DEFAULT_MIN_COUNT)
    sp.add_argument("--test-fraction", type=float, default=0.1)
    seed(sp)

    sp = sub.add_parser("train-w2v", help="skip-gram embeddings for ETM initialization")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--text-output")
    sp.add_argument("--embed-dim", type=int, default=300)
    sp.add_argument("--window", type=int, default=5)
    sp.add_argument("--negatives", type=int, default=5)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--lr", type=float, default=0.025)
    sp.add_argument("--subsample", type=float, default=1e-3)
    seed(sp)

    sp = sub.add_parser("train-etm", help="fit an embedded topic model")
    sp.add_argument("--input", required=True)
    sp.add_argument("--test", help="held-out corpus for checkpoint selection")
    sp.add_argument("--output", required=True)
    sp.add_argument("--topics", type=int, default=50)
    sp.add_argument("--embed-dim", type=int, default=300)
    sp.add_argument("--hidden-dim", type=int, default=800)
    sp.add_argument("--lr", type=float, default=0.005)
    sp.add_argument("--batch-size", type=int, default=1000)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lambda-td", type=float, default=0.0)
    sp.add_argument("--kl-warmup", type=int, default=0)
    sp.add_argument("--eval-every", type=int, default=2500)
    sp.add_argument("--grad-clip", type=float, default=5.0)
    sp.add_argument("--permutation-schedule", choices=["step", "epoch", "fixed"], default="step")
    sp.add_argument("--pretrained-embeddings")
    sp.add_argument("--fine-tune-embeddings", action=argparse.BooleanOptionalAction, default=True)
    seed(sp)

    sp = sub.add_parser("train-hdp", help="fit an HDP by collapsed Gibbs sampling")
    sp.add_argument("--input", required=True)
    sp.add_argument("--test", help="held-out corpus for checkpoint selection")
    sp.add_argument("--output", required=True)
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.add_argument("--eta", type=float, default=0.01)
    sp.add_argument("--iterations", type=int, default=4000)
    sp.add_argument("--burn-in", type=int, default=100)
    sp.add_argument("--eval-every", type=int, default=100)
    fold(sp)
    seed(sp)

    sp = sub.add_parser("eval", help="perplexity, coherence and topic gap report")
    sp.add_argument("--model", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--output", "--out", dest="output", required=True)
    sp.add_argument("--name")
    sp.add_argument("--answers")
    sp.add_argument("--annotations")
    fold(sp)
    seed(sp)

    sp = sub.add_parser("intrusion-gen", help="word-list pairs for the contrast test")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="reference corpus for topic prior")
    sp.add_argument("--pairs", type=int, default=100)
    sp.add_argument("--output", required=True, help="output directory")
    fold(sp)
    seed(sp)

    sp = sub.add_parser("intrusion-score", help="contrast score of an annotation file")
    sp.add_argument("--answers", required=True)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--output")

    sp = sub.add_parser("trends", help="per-day meta-topic prevalence CSVs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="corpus to score (the test split by convention)")
    sp.add_argument("--full-corpus", metavar="OTHER_SPLIT",
                    help="also score this split, e.g. the training corpus, for full-corpus prevalence")
    sp.add_argument("--meta-map", required=True)
    sp.add_argument("--output", required=True, help="output directory")
    fold(sp)
    seed(sp)

    sp = sub.add_parser("grid", help="grid search with majority-of-metrics selection")
    sp.add_argument("--grid-file", required=True)
    sp.add_argument("--model-kind", choices=["etm", "hdp"], default="etm")
    sp.add_argument("--input", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--max-configs", type=int, default=256)
    seed(sp)
    return p


_CATEGORIES = [
    (IngestError, "ingest"),
    (FormatError, "format"),
    (ConfigurationError, "config"),
    (TrainingError, "training"),
    (TopicLabError, "error"),
    (OSError, "io"),
]


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        config, outputs = COMMANDS[a.command](a)
    except tuple(c for c, _ in _CATEGORIES) as exc:
        cat = next(name for cls, name in _CATEGORIES if isinstance(exc, cls))
        print(f"topiclab {a.command}: {cat}: {exc}", file=sys.stderr)
        return 1
    inputs = {k: str(v) for k, v in vars(a).items()
              if k in ("input", "test", "model", "meta_map", "grid_file", "pretrained_embeddings",
                       "full_corpus", "stopwords", "lemmas", "answers", "annotations") and v}
    manifest = RunManifest(
        command=" ".join(["topiclab", *(argv if argv is not None else sys.argv[1:])]),
        config=config, seed=getattr(a, "seed", None), inputs=inputs,
        outputs=[str(p) for p in outputs], version=_version_string(),
        duration_s=round(time.perf_counter() - t0, 3),
    )
    target = a.output if getattr(a, "output", None) else (outputs[0] if outputs else None)
    if target is not None:
        manifest.write(target)
    return 0


def main() -> None:
    sys.exit(run())
