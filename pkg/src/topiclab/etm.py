"""Embedded topic model with a topic-diversity regularizer.

Topic-word probabilities are factored as ``beta = softmax(t @ v.T)`` with
topic embeddings ``t`` (K x H) and word embeddings ``v`` (V x H). Document
proportions follow a logistic-normal prior and are inferred by an amortized
encoder; parameters are fit by maximizing the ELBO, optionally plus
``lam * J(beta)`` where J is the permutation-paired total-variation distance
between topic rows.

All gradients are derived by hand; see :func:`objective`.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import ConfigurationError, FormatError, TrainingError
from .corpus import Corpus, Document, bow_matrix
from .embeddings import EmbeddingMatrix

log = logging.getLogger(__name__)

LOG_EPS = 1e-10
ENCODER_KEYS = ("W1", "b1", "W2", "b2", "W_mu", "b_mu", "W_lv", "b_lv")

MODEL_MAGIC = b"TLM1"
MODEL_VERSION = 1
KIND_ETM = 1
KIND_HDP = 2


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class EtmModel:
    t: np.ndarray
    v: np.ndarray
    encoder: dict[str, np.ndarray]

    def __post_init__(self):
        if self.t.shape[1] != self.v.shape[1]:
            raise ConfigurationError("topic and word embeddings disagree on H")
        missing = set(ENCODER_KEYS) - set(self.encoder)
        if missing:
            raise ConfigurationError(f"encoder is missing {sorted(missing)}")

    @property
    def K(self) -> int:
        return self.t.shape[0]

    @property
    def V(self) -> int:
        return self.v.shape[0]

    @property
    def H(self) -> int:
        return self.t.shape[1]

    @property
    def hidden(self) -> int:
        return self.encoder["W1"].shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"t": self.t, "v": self.v, **self.encoder}

    def beta(self) -> np.ndarray:
        return topic_word_matrix(self.t, self.v)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())

    def copy(self) -> "EtmModel":
        return copy.deepcopy(self)

    @classmethod
    def initialize(
        cls,
        K: int,
        V: int,
        H: int,
        hidden: int,
        rng: np.random.Generator,
        word_embeddings: np.ndarray | None = None,
    ) -> "EtmModel":
        """Uniform(+-1/sqrt(fan_in)) initialization for every layer."""

        def unif(shape, fan_in):
            b = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape)

        enc = {
            "W1": unif((V, hidden), V),
            "b1": unif(hidden, V),
            "W2": unif((hidden, hidden), hidden),
            "b2": unif(hidden, hidden),
            "W_mu": unif((hidden, K), hidden),
            "b_mu": unif(K, hidden),
            "W_lv": unif((hidden, K), hidden),
            "b_lv": unif(K, hidden),
        }
        t = unif((K, H), H)
        if word_embeddings is None:
            v = unif((V, H), H)
        else:
            v = np.array(word_embeddings, dtype=np.float64)
            if v.shape != (V, H):
                raise ConfigurationError(f"pretrained embeddings have shape {v.shape}, expected {(V, H)}")
        return cls(t, v, enc)


def topic_word_matrix(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise softmax of the K x V logit matrix ``t @ v.T``."""
    return softmax(t @ v.T, axis=1)


def _normalize_bow(bow: np.ndarray) -> np.ndarray:
    bow = np.atleast_2d(np.asarray(bow, dtype=np.float64))
    n = bow.sum(axis=1, keepdims=True)
    if np.any(n <= 0):
        raise ConfigurationError("cannot encode an all-zero bag of words")
    return bow / n


def _encoder_forward(enc: dict[str, np.ndarray], x: np.ndarray) -> dict[str, np.ndarray]:
    a1 = x @ enc["W1"] + enc["b1"]
    h1 = _softplus(a1)
    a2 = h1 @ enc["W2"] + enc["b2"]
    h2 = _softplus(a2)
    mu = h2 @ enc["W_mu"] + enc["b_mu"]
    lv = h2 @ enc["W_lv"] + enc["b_lv"]
    return {"x": x, "a1": a1, "h1": h1, "a2": a2, "h2": h2, "mu": mu, "lv": lv}


def encode(model: EtmModel, bow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Variational parameters ``(mu, log_var)`` for one bow vector or a batch of rows."""
    bow = np.asarray(bow)
    cache = _encoder_forward(model.encoder, _normalize_bow(bow))
    if bow.ndim == 1:
        return cache["mu"][0], cache["lv"][0]
    return cache["mu"], cache["lv"]


def sample_theta(mu: np.ndarray, log_var: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Reparameterized logistic-normal draw: ``softmax(mu + exp(log_var / 2) * noise)``."""
    return softmax(mu + np.exp(0.5 * log_var) * noise, axis=-1)


def kl_to_standard_normal(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(np.exp(log_var) + mu**2 - 1.0 - log_var, axis=-1)


# ------------------------------------------------------------- regularizer


@dataclass(frozen=True)
class Permutation:
    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if not np.array_equal(np.sort(m), np.arange(len(m))):
            raise ConfigurationError("permutation mapping must be a bijection on 0..K-1")
        object.__setattr__(self, "mapping", m)

    @property
    def displaced(self) -> int:
        return int(np.sum(self.mapping != np.arange(len(self.mapping))))

    def __len__(self) -> int:
        return len(self.mapping)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def sample_displacing_permutation(K: int, rng: np.random.Generator) -> Permutation:
    """Uniform random permutation of 0..K-1, redrawn until it moves at least one element."""
    if K < 2:
        raise ConfigurationError("a displacing permutation needs K >= 2")
    ident = np.arange(K)
    while True:
        perm = rng.permutation(K)
        if np.any(perm != ident):
            return Permutation(perm)


def diversity_regularizer(beta: np.ndarray, perm: Permutation) -> float:
    """Mean total-variation distance between each topic row and its permuted partner.

    Normalized by the number of displaced indices; fixed points add nothing.
    """
    n = perm.displaced
    if n == 0:
        raise ConfigurationError("identity permutation: regularizer undefined")
    diff = beta - beta[perm.mapping]
    return 0.5 * float(np.abs(diff).sum()) / n


def diversity_gradient(beta: np.ndarray, perm: Permutation) -> np.ndarray:
    """Subgradient of :func:`diversity_regularizer` with respect to ``beta`` (sign(0) = 0)."""
    s = np.sign(beta - beta[perm.mapping])
    g = s.copy()
    # row pi(i) receives -sign(beta_i - beta_pi(i)) from term i
    np.add.at(g, perm.mapping, -s)
    return 0.5 * g / perm.displaced


# --------------------------------------------------------------- objective


def objective(
    model: EtmModel,
    batch: np.ndarray,
    noise: np.ndarray,
    perm: Permutation | None = None,
    lam: float = 0.0,
    kl_weight: float = 1.0,
    mean: bool = True,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Training objective and its exact gradient for one Monte-Carlo noise draw.

    The value is ``ELBO(batch) / B + lam * J(beta, perm)`` when ``mean`` is true,
    else the summed ELBO plus ``lam * J``. The third return value holds the
    separate ``elbo`` (summed), ``reconstruction``, ``kl`` and ``j`` terms.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    B = batch.shape[0]
    enc = model.encoder
    c = _encoder_forward(enc, _normalize_bow(batch))
    mu, lv = c["mu"], c["lv"]
    std = np.exp(0.5 * lv)
    theta = softmax(mu + std * noise, axis=1)
    beta = model.beta()
    p = theta @ beta
    rec = float(np.sum(batch * np.log(p + LOG_EPS)))
    kl = float(np.sum(kl_to_standard_normal(mu, lv)))
    elbo_sum = rec - kl
    scale = 1.0 / B if mean else 1.0

    j = 0.0
    if lam and perm is not None:
        j = diversity_regularizer(beta, perm)
    value = scale * (rec - kl_weight * kl) + lam * j

    g_p = scale * batch / (p + LOG_EPS)
    g_theta = g_p @ beta.T
    g_beta = theta.T @ g_p
    if lam and perm is not None:
        g_beta += lam * diversity_gradient(beta, perm)
    g_delta = theta * (g_theta - np.sum(theta * g_theta, axis=1, keepdims=True))
    g_mu = g_delta - scale * kl_weight * mu
    g_lv = g_delta * noise * std * 0.5 - scale * kl_weight * 0.5 * (np.exp(lv) - 1.0)

    grads = {
        "W_mu": c["h2"].T @ g_mu,
        "b_mu": g_mu.sum(axis=0),
        "W_lv": c["h2"].T @ g_lv,
        "b_lv": g_lv.sum(axis=0),
    }
    g_h2 = g_mu @ enc["W_mu"].T + g_lv @ enc["W_lv"].T
    g_a2 = g_h2 * expit(c["a2"])
    grads["W2"] = c["h1"].T @ g_a2
    grads["b2"] = g_a2.sum(axis=0)
    g_a1 = (g_a2 @ enc["W2"].T) * expit(c["a1"])
    grads["W1"] = c["x"].T @ g_a1
    grads["b1"] = g_a1.sum(axis=0)

    g_logits = beta * (g_beta - np.sum(beta * g_beta, axis=1, keepdims=True))
    grads["t"] = g_logits @ model.v
    grads["v"] = g_logits.T @ model.t
    terms = {"elbo": elbo_sum, "reconstruction": rec, "kl": kl, "j": j}
    return value, grads, terms


def elbo(model: EtmModel, batch: np.ndarray, noise: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Summed single-sample ELBO of ``batch`` and its gradient for every parameter."""
    value, grads, _ = objective(model, batch, noise, mean=False)
    return value, grads


# --------------------------------------------------------------- training


class Adam:
    """Adam for gradient *descent* over a dict of arrays, updated in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


@dataclass
class EtmTrainConfig:
    K: int = 50
    H: int = 300
    hidden: int = 800
    learning_rate: float = 0.005
    batch_size: int = 1000
    epochs: int = 100
    lambda_td: float = 0.0
    kl_warmup_steps: int = 0
    pretrained_embeddings: EmbeddingMatrix | None = None
    fine_tune_embeddings: bool = True
    seed: int = 0
    eval_every: int = 2500
    grad_clip: float = 5.0
    permutation_schedule: str = "step"

    def __post_init__(self):
        if self.K < 2:
            raise ConfigurationError("ETM needs K >= 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0 or self.lambda_td < 0:
            raise ConfigurationError("learning_rate must be > 0 and lambda_td >= 0")
        if self.permutation_schedule not in ("step", "epoch", "fixed"):
            raise ConfigurationError("permutation_schedule must be 'step', 'epoch' or 'fixed'")
        if self.pretrained_embeddings is not None and self.pretrained_embeddings.dim != self.H:
            raise ConfigurationError(
                f"pretrained embeddings have dim {self.pretrained_embeddings.dim}, config H={self.H}"
            )

    def snapshot(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "pretrained_embeddings"}
        d["pretrained_embeddings"] = self.pretrained_embeddings is not None
        return d


@dataclass
class LogEntry:
    iteration: int
    elbo: float
    j_value: float
    perplexity: float


@dataclass
class TrainingLog:
    entries: list[LogEntry] = field(default_factory=list)
    best_iteration: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "elbo", "j_value", "perplexity"])
            for e in self.entries:
                w.writerow([e.iteration, repr(e.elbo), repr(e.j_value), repr(e.perplexity)])


def _kl_weight(config: EtmTrainConfig, step: int) -> float:
    if config.kl_warmup_steps <= 0:
        return 1.0
    return min(1.0, step / config.kl_warmup_steps)


def train_etm(
    corpus: Corpus, config: EtmTrainConfig, eval_corpus: Corpus | None = None
) -> tuple[EtmModel, TrainingLog]:
    """Fit an ETM by Adam on mini-batches; return the best checkpoint and the log.

    Checkpoints are scored every ``config.eval_every`` iterations (and at the
    last one) by perplexity on ``eval_corpus``, or on the training corpus when
    none is given. Each log entry's ELBO is the per-document training ELBO
    averaged over the steps since the previous entry.
    """
    from .metrics import log_likelihood_and_perplexity

    if not corpus.documents:
        raise ConfigurationError("cannot train on an empty corpus")
    rng = np.random.default_rng(config.seed)
    pre = config.pretrained_embeddings.vectors if config.pretrained_embeddings is not None else None
    model = EtmModel.initialize(config.K, corpus.V, config.H, config.hidden, rng, pre)
    train_v = pre is None or config.fine_tune_embeddings
    X = corpus.bow_matrix()
    eval_docs = (eval_corpus or corpus).documents
    opt = Adam(config.learning_rate)
    n = X.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    train_log = TrainingLog()

    def evaluate(iteration: int, elbo_mean: float, j_val: float) -> None:
        perp = log_likelihood_and_perplexity(etm_view(model), eval_docs)[1]
        train_log.entries.append(LogEntry(iteration, elbo_mean, j_val, perp))
        log.info("iter %d  elbo/doc %.4f  J %.4f  perp %.3f", iteration, elbo_mean, j_val, perp)
        nonlocal best, best_perp
        if perp < best_perp:
            best_perp, best = perp, (iteration, model.copy())

    perm = sample_displacing_permutation(config.K, rng)
    first = X[: min(config.batch_size, n)].toarray()
    _, _, terms0 = objective(model, first, np.zeros((first.shape[0], config.K)), perm, config.lambda_td)
    best, best_perp = (0, model.copy()), math.inf
    evaluate(0, terms0["elbo"] / first.shape[0], diversity_regularizer(model.beta(), perm))

    step = 0
    window_elbo, window_docs = 0.0, 0
    j_val = 0.0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        if config.permutation_schedule == "epoch" and epoch > 0:
            perm = sample_displacing_permutation(config.K, rng)
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            batch = X[idx].toarray()
            noise = rng.standard_normal((len(idx), config.K))
            if config.permutation_schedule == "step":
                perm = sample_displacing_permutation(config.K, rng)
            _, grads, terms = objective(
                model, batch, noise, perm, config.lambda_td, _kl_weight(config, step)
            )
            if config.lambda_td:
                j_val = terms["j"]
            else:
                j_val = diversity_regularizer(model.beta(), perm)
            if not train_v:
                del grads["v"]
            clip_by_global_norm(grads, config.grad_clip)
            opt.step(model.params() if train_v else {k: a for k, a in model.params().items() if k != "v"},
                     {k: -g for k, g in grads.items()})
            step += 1
            if not model.is_finite():
                raise TrainingError(f"non-finite parameters after step {step} (epoch {epoch})")
            window_elbo += terms["elbo"]
            window_docs += len(idx)
            if step % config.eval_every == 0 or step == total_steps:
                evaluate(step, window_elbo / window_docs, j_val)
                window_elbo, window_docs = 0.0, 0

    train_log.best_iteration = best[0]
    return best[1], train_log


# -------------------------------------------------------------- inference


def _doc_bow(doc: Document, V: int) -> np.ndarray:
    ids = doc.token_ids[(doc.token_ids >= 0) & (doc.token_ids < V)]
    if len(ids) == 0:
        raise ConfigurationError(f"document {doc.id!r} has no in-vocabulary tokens")
    return np.bincount(ids, minlength=V).astype(np.float64)


def infer_etm(model: EtmModel, doc: Document) -> np.ndarray:
    """Topic proportions ``softmax(mu)`` from the encoder; no sampling."""
    mu, _ = encode(model, _doc_bow(doc, model.V))
    return softmax(mu)


def infer_etm_many(model: EtmModel, docs: Sequence[Document], chunk: int = 2048) -> np.ndarray:
    out = np.empty((len(docs), model.K))
    for s in range(0, len(docs), chunk):
        part = list(docs[s : s + chunk])
        for d in part:
            if not np.any(d.token_ids < model.V):
                raise ConfigurationError(f"document {d.id!r} has no in-vocabulary tokens")
        X = bow_matrix([Document(d.id, d.token_ids[d.token_ids < model.V], d.day_index) for d in part], model.V)
        mu, _ = encode(model, X.toarray())
        out[s : s + len(part)] = softmax(mu, axis=1)
    return out


def etm_view(model: EtmModel):
    from .metrics import TopicModelView

    return TopicModelView(
        topic_word=model.beta(),
        infer=lambda doc: infer_etm(model, doc),
        infer_many=lambda docs: infer_etm_many(model, docs),
    )


# --------------------------------------------------------------------- io


def save_etm(model: EtmModel, path: str | Path) -> None:
    """TLM1 layout: magic, u32 version, u32 kind=1, u32 K, V, H, hidden, then
    t, v, W1, b1, W2, b2, W_mu, b_mu, W_lv, b_lv as little-endian float32."""
    header = MODEL_MAGIC + struct.pack("<IIIIII", MODEL_VERSION, KIND_ETM, model.K, model.V, model.H, model.hidden)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for a in [model.t, model.v] + [model.encoder[k] for k in ENCODER_KEYS])
    Path(path).write_bytes(header + body)


def _etm_shapes(K, V, H, hidden):
    return {
        "t": (K, H), "v": (V, H),
        "W1": (V, hidden), "b1": (hidden,), "W2": (hidden, hidden), "b2": (hidden,),
        "W_mu": (hidden, K), "b_mu": (K,), "W_lv": (hidden, K), "b_lv": (K,),
    }


def read_etm(buf: bytes, path: str | Path = "<buffer>") -> EtmModel:
    version, kind, K, V, H, hidden = struct.unpack_from("<IIIIII", buf, 4)
    if version != MODEL_VERSION or kind != KIND_ETM:
        raise FormatError(f"{path}: not an ETM model file (version {version}, kind {kind})")
    shapes = _etm_shapes(K, V, H, hidden)
    need = 28 + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)}")
    pos, arrays = 28, {}
    for name, shape in shapes.items():
        cnt = int(np.prod(shape))
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=cnt, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * cnt
    t, v = arrays.pop("t"), arrays.pop("v")
    return EtmModel(t, v, arrays)


def load_etm(path: str | Path) -> EtmModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    return read_etm(buf, path)
