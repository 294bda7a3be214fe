"""Hierarchical Dirichlet process topic model, collapsed Gibbs sampling.

Direct-assignment scheme: each token carries a topic id, the top-level
stick weights over the represented topics (plus the unrepresented
remainder) are explicit, and per-topic table counts are resampled with
Antoniak draws at the end of every sweep before a Dirichlet draw of the
weights. Topics that lose their last token are folded back into the
remainder immediately and compacted away at sweep end.
"""
from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from . import ConfigurationError, FormatError, TopicLabError
from .corpus import Corpus, Document

log = logging.getLogger(__name__)

MODEL_MAGIC = b"TLM1"
MODEL_VERSION = 1
KIND_HDP = 2

_SLACK = 8
_DONE = -1
_NEG_COUNT = -2


@dataclass
class HdpConfig:
    alpha: float = 0.1
    gamma: float = 0.1
    eta: float = 0.01
    iterations: int = 4000
    burn_in: int = 100
    eval_every: int = 100
    seed: int = 0
    fold_in_iters: int = 20
    fold_in_burn_in: int = 10

    def __post_init__(self):
        if min(self.alpha, self.gamma, self.eta) <= 0:
            raise ConfigurationError("alpha, gamma and eta must be positive")
        if self.iterations <= self.burn_in or self.burn_in < 0:
            raise ConfigurationError("need 0 <= burn_in < iterations")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")


@dataclass
class GibbsState:
    """Sampler state over the ``K_active`` represented topics (ids are compact)."""

    words: np.ndarray       # flat token word ids
    doc_of: np.ndarray      # flat token document index
    doc_ptr: np.ndarray     # document d owns tokens doc_ptr[d]:doc_ptr[d+1]
    z: np.ndarray           # flat token topic ids
    n_dk: np.ndarray        # D x K
    n_kw: np.ndarray        # K x V
    n_k: np.ndarray         # K
    m_k: np.ndarray         # K table counts
    beta: np.ndarray        # K stick weights of represented topics
    beta_u: float           # unrepresented remainder
    alpha: float
    gamma: float
    eta: float

    @property
    def V(self) -> int:
        return self.n_kw.shape[1]

    @property
    def K_active(self) -> int:
        return len(self.n_k)

    @property
    def n_docs(self) -> int:
        return len(self.doc_ptr) - 1

    @property
    def top_level_weights(self) -> np.ndarray:
        return np.append(self.beta, self.beta_u)

    @property
    def assignments(self) -> list[np.ndarray]:
        return [self.z[self.doc_ptr[d] : self.doc_ptr[d + 1]] for d in range(self.n_docs)]

    def check(self) -> None:
        """Raise if any count table disagrees with the assignments."""
        D, K = self.n_docs, self.K_active
        if np.any(self.z < 0) or np.any(self.z >= K):
            raise TopicLabError("assignment outside active topics")
        n_dk = np.zeros((D, K), dtype=np.int64)
        np.add.at(n_dk, (self.doc_of, self.z), 1)
        n_kw = np.zeros((K, self.V), dtype=np.int64)
        np.add.at(n_kw, (self.z, self.words), 1)
        if not (np.array_equal(n_dk, self.n_dk) and np.array_equal(n_kw, self.n_kw)):
            raise TopicLabError("count tables inconsistent with assignments")
        if not np.array_equal(self.n_kw.sum(axis=1), self.n_k) or np.any(self.n_k <= 0):
            raise TopicLabError("topic totals inconsistent or empty topic present")
        if abs(self.beta.sum() + self.beta_u - 1.0) > 1e-9:
            raise TopicLabError("top-level weights do not sum to 1")

    def checksum(self) -> int:
        h = 0
        for a in (self.z, self.n_dk, self.n_kw, self.n_k, self.m_k, self.beta, np.array([self.beta_u])):
            h = zlib.crc32(np.ascontiguousarray(a).tobytes(), h)
        return h


# ----------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _conditional_into(probs, n_dk_d, n_kw, n_k, beta, beta_u, w, alpha, eta, V):
    """Unnormalized token conditional; slot ``len(n_k)`` is the new-topic slot."""
    K = n_k.shape[0]
    total = 0.0
    for k in range(K):
        if n_k[k] > 0:
            p = (n_dk_d[k] + alpha * beta[k]) * (n_kw[k, w] + eta) / (n_k[k] + V * eta)
        else:
            p = 0.0
        probs[k] = p
        total += p
    p_new = alpha * beta_u / V
    probs[K] = p_new
    return total + p_new


@numba.njit(cache=True)
def _sweep_kernel(words, doc_of, z, n_dk, n_kw, n_k, beta, beta_u_box, n_active_box,
                  alpha, gamma, eta, u_pick, u_stick, start, init):
    K = n_k.shape[0]
    V = n_kw.shape[1]
    probs = np.empty(K + 1)
    for i in range(start, words.shape[0]):
        d = doc_of[i]
        w = words[i]
        if not init:
            k = z[i]
            n_dk[d, k] -= 1
            n_kw[k, w] -= 1
            n_k[k] -= 1
            if n_dk[d, k] < 0 or n_kw[k, w] < 0 or n_k[k] < 0:
                return _NEG_COUNT
            if n_k[k] == 0:
                beta_u_box[0] += beta[k]
                beta[k] = 0.0
                n_active_box[0] -= 1
        total = _conditional_into(probs, n_dk[d], n_kw, n_k, beta, beta_u_box[0], w, alpha, eta, V)
        r = u_pick[i] * total
        acc = 0.0
        k_new = K
        for k in range(K):
            acc += probs[k]
            if r < acc and probs[k] > 0.0:
                k_new = k
                break
        if k_new == K:
            for f in range(K):
                if n_k[f] == 0:
                    k_new = f
                    break
            b = 1.0 - (1.0 - u_stick[i]) ** (1.0 / gamma)
            beta[k_new] = b * beta_u_box[0]
            beta_u_box[0] = (1.0 - b) * beta_u_box[0]
            n_active_box[0] += 1
        z[i] = k_new
        n_dk[d, k_new] += 1
        n_kw[k_new, w] += 1
        n_k[k_new] += 1
        if n_active_box[0] == K:
            return i + 1
    return _DONE


@numba.njit(cache=True)
def _fold_in_kernel(words, phi, beta, alpha, iters, burn_in, u):
    K = phi.shape[0]
    n = words.shape[0]
    z = np.empty(n, dtype=np.int64)
    n_dk = np.zeros(K)
    probs = np.empty(K)
    theta = np.zeros(K)
    mass = 0.0
    for k in range(K):
        mass += beta[k]
    kept = 0
    for it in range(iters + 1):
        for i in range(n):
            w = words[i]
            if it > 0:
                n_dk[z[i]] -= 1.0
            total = 0.0
            for k in range(K):
                probs[k] = (n_dk[k] + alpha * beta[k]) * phi[k, w]
                total += probs[k]
            r = u[it, i] * total
            acc = 0.0
            pick = K - 1
            for k in range(K):
                acc += probs[k]
                if r < acc:
                    pick = k
                    break
            z[i] = pick
            n_dk[pick] += 1.0
        # pass 0 is the sequential initialization, not a sweep
        if it > burn_in or (it == iters and kept == 0):
            for k in range(K):
                theta[k] += (n_dk[k] + alpha * beta[k]) / (n + alpha * mass)
            kept += 1
    for k in range(K):
        theta[k] /= kept
    return theta


# -------------------------------------------------------------- sampler ops


def _padded(state: GibbsState, extra: int):
    K = state.K_active
    Kc = K + extra
    n_dk = np.zeros((state.n_docs, Kc), dtype=np.int64)
    n_dk[:, :K] = state.n_dk
    n_kw = np.zeros((Kc, state.V), dtype=np.int64)
    n_kw[:K] = state.n_kw
    n_k = np.zeros(Kc, dtype=np.int64)
    n_k[:K] = state.n_k
    beta = np.zeros(Kc)
    beta[:K] = state.beta
    return n_dk, n_kw, n_k, beta


def _run_kernel(state: GibbsState, rng: np.random.Generator, init: bool) -> None:
    N = len(state.words)
    u_pick = rng.random(N)
    u_stick = rng.random(N)
    n_dk, n_kw, n_k, beta = _padded(state, _SLACK)
    beta_u = np.array([state.beta_u])
    n_active = np.array([state.K_active])
    start = 0
    while True:
        ret = _sweep_kernel(state.words, state.doc_of, state.z, n_dk, n_kw, n_k, beta, beta_u, n_active,
                            state.alpha, state.gamma, state.eta, u_pick, u_stick, start, init)
        if ret == _NEG_COUNT:
            raise TopicLabError("internal consistency failure: negative count during sweep")
        if ret == _DONE:
            break
        # out of free topic slots: grow capacity and resume at token ``ret``
        Kc = len(n_k)
        grow = max(_SLACK, Kc)
        n_dk = np.hstack([n_dk, np.zeros((n_dk.shape[0], grow), dtype=np.int64)])
        n_kw = np.vstack([n_kw, np.zeros((grow, n_kw.shape[1]), dtype=np.int64)])
        n_k = np.append(n_k, np.zeros(grow, dtype=np.int64))
        beta = np.append(beta, np.zeros(grow))
        start = ret
    keep = np.flatnonzero(n_k > 0)
    remap = np.full(len(n_k), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    state.z[:] = remap[state.z]
    state.n_dk = n_dk[:, keep]
    state.n_kw = n_kw[keep]
    state.n_k = n_k[keep]
    state.beta = beta[keep]
    state.beta_u = float(beta_u[0])
    state.m_k = np.zeros(len(keep), dtype=np.int64)


def sample_table_counts(state: GibbsState, rng: np.random.Generator) -> np.ndarray:
    """Antoniak draws: tables per (document, topic) given the customer counts."""
    d_idx, k_idx = np.nonzero(state.n_dk)
    counts = state.n_dk[d_idx, k_idx]
    ab = state.alpha * state.beta[k_idx]
    ks = np.repeat(k_idx, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    j = np.arange(counts.sum()) - starts
    abj = np.repeat(ab, counts)
    tables = rng.random(len(j)) < abj / (abj + j)
    return np.bincount(ks[tables], minlength=state.K_active).astype(np.int64)


def sample_top_level_weights(m_k: np.ndarray, gamma: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    g = rng.standard_gamma(np.append(m_k.astype(np.float64), gamma))
    g /= g.sum()
    return g[:-1], float(g[-1])


def init_state(corpus: Corpus, config: HdpConfig, rng: np.random.Generator) -> GibbsState:
    """Assign every token by sequential draws from the incremental CRP predictive."""
    if not corpus.documents:
        raise ConfigurationError("cannot initialize on an empty corpus")
    lens = np.array([len(d) for d in corpus.documents])
    words = np.concatenate([d.token_ids for d in corpus.documents]).astype(np.int64)
    doc_ptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    doc_of = np.repeat(np.arange(len(lens)), lens).astype(np.int64)
    D, V = len(lens), corpus.V
    state = GibbsState(
        words=words, doc_of=doc_of, doc_ptr=doc_ptr, z=np.full(len(words), -1, dtype=np.int64),
        n_dk=np.zeros((D, 0), dtype=np.int64), n_kw=np.zeros((0, V), dtype=np.int64),
        n_k=np.zeros(0, dtype=np.int64), m_k=np.zeros(0, dtype=np.int64), beta=np.zeros(0), beta_u=1.0,
        alpha=config.alpha, gamma=config.gamma, eta=config.eta,
    )
    _run_kernel(state, rng, init=True)
    return state


def token_conditional(state: GibbsState, d: int, w: int) -> np.ndarray:
    """Normalized probabilities over the active topics plus a final new-topic slot.

    The token being resampled must already be removed from the counts.
    """
    if np.any(state.n_dk[d] < 0) or np.any(state.n_kw < 0) or np.any(state.n_k < 0):
        raise TopicLabError("internal consistency failure: negative count")
    probs = np.empty(state.K_active + 1)
    total = _conditional_into(probs, state.n_dk[d].astype(np.int64), state.n_kw, state.n_k, state.beta,
                              state.beta_u, int(w), state.alpha, state.eta, state.V)
    return probs / total


def gibbs_sweep(state: GibbsState, rng: np.random.Generator) -> GibbsState:
    """Resample every token once, then table counts and top-level weights."""
    _run_kernel(state, rng, init=False)
    state.m_k = sample_table_counts(state, rng)
    state.beta, state.beta_u = sample_top_level_weights(state.m_k, state.gamma, rng)
    return state


def extract_topics(state: GibbsState) -> np.ndarray:
    """Posterior-mean topic-word matrix (n_kw + eta) / (n_k + V eta)."""
    return (state.n_kw + state.eta) / (state.n_k[:, None] + state.V * state.eta)


# ------------------------------------------------------------ frozen model


@dataclass
class HdpModel:
    """Frozen HDP: topic-word matrix, top-level weights (remainder last), concentrations."""

    phi: np.ndarray
    weights: np.ndarray
    alpha: float
    gamma: float
    eta: float

    @property
    def K(self) -> int:
        return self.phi.shape[0]

    @property
    def V(self) -> int:
        return self.phi.shape[1]

    @classmethod
    def from_state(cls, state: GibbsState) -> "HdpModel":
        return cls(extract_topics(state), state.top_level_weights.copy(), state.alpha, state.gamma, state.eta)


def fold_in(model: HdpModel | GibbsState, doc: Document, iters: int, rng: np.random.Generator,
            burn_in: int | None = None) -> np.ndarray:
    """Topic proportions of a held-out document by Gibbs sampling it alone.

    Global topics are read-only and new topics are disabled. Returns the
    mean over post-burn-in sweeps of (n_dk + alpha beta_k) / (n + alpha sum beta).
    """
    if isinstance(model, GibbsState):
        model = HdpModel.from_state(model)
    ids = doc.token_ids[(doc.token_ids >= 0) & (doc.token_ids < model.V)].astype(np.int64)
    if len(ids) == 0:
        raise ConfigurationError(f"document {doc.id!r} has no in-vocabulary tokens")
    if iters < 1:
        raise ConfigurationError("fold-in needs at least one sweep")
    if burn_in is None:
        burn_in = iters // 2
    u = rng.random((iters + 1, len(ids)))
    theta = _fold_in_kernel(ids, model.phi, model.weights[:-1], model.alpha, iters, burn_in, u)
    return theta / theta.sum()


def doc_seed(seed: int, doc: Document) -> np.random.Generator:
    """Generator keyed on the document so fold-in results do not depend on evaluation order."""
    h = zlib.crc32(doc.id.encode("utf-8"))
    h = zlib.crc32(np.asarray(doc.token_ids, dtype="<i8").tobytes(), h)
    return np.random.default_rng([seed, h])


def hdp_view(model: HdpModel, iters: int = 20, burn_in: int = 10, seed: int = 0):
    from .metrics import TopicModelView

    def infer(doc: Document) -> np.ndarray:
        return fold_in(model, doc, iters, doc_seed(seed, doc), burn_in)

    return TopicModelView(topic_word=model.phi, infer=infer)


# ----------------------------------------------------------------- training


@dataclass
class HdpTrace:
    k_active: list[int] = field(default_factory=list)
    checkpoints: list[tuple[int, int, float]] = field(default_factory=list)  # (sweep, K, score)
    best_sweep: int = 0
    criterion: str = "train_loglik"


def training_log_likelihood(state: GibbsState) -> float:
    phi = extract_topics(state)
    lens = np.diff(state.doc_ptr)
    theta = (state.n_dk + state.alpha * state.beta) / (lens[:, None] + state.alpha * state.beta.sum())
    probs = np.einsum("ik,ki->i", theta[state.doc_of], phi[:, state.words])
    return float(np.sum(np.log(probs)))


def train_hdp(corpus: Corpus, config: HdpConfig, eval_corpus: Corpus | None = None,
              callback=None) -> tuple[HdpModel, HdpTrace, GibbsState]:
    """Run the chain and keep the best periodic checkpoint after burn-in.

    Checkpoints are scored by held-out perplexity (fold-in) on
    ``eval_corpus`` if given, otherwise by training log-likelihood.
    """
    from .metrics import log_likelihood_and_perplexity

    rng = np.random.default_rng(config.seed)
    state = init_state(corpus, config, rng)
    trace = HdpTrace(criterion="heldout_perplexity" if eval_corpus is not None else "train_loglik")
    best_score, best = -math.inf, None
    for it in range(1, config.iterations + 1):
        gibbs_sweep(state, rng)
        trace.k_active.append(state.K_active)
        if callback is not None:
            callback(it, state)
        if it > config.burn_in and (it % config.eval_every == 0 or it == config.iterations):
            model = HdpModel.from_state(state)
            if eval_corpus is not None:
                view = hdp_view(model, config.fold_in_iters, config.fold_in_burn_in, config.seed)
                score = -log_likelihood_and_perplexity(view, eval_corpus)[1]
            else:
                score = training_log_likelihood(state)
            trace.checkpoints.append((it, state.K_active, score))
            log.info("sweep %d  K=%d  score %.4f", it, state.K_active, score)
            if score > best_score:
                best_score, best = score, model
                trace.best_sweep = it
    return best, trace, state


# ----------------------------------------------------------------------- io


def save_hdp(model: HdpModel, path: str | Path) -> None:
    """TLM1 layout: magic, u32 version, u32 kind=2, u32 K, u32 V, then K*V phi,
    K+1 top-level weights (remainder last), alpha, gamma, eta; little-endian float64."""
    header = MODEL_MAGIC + struct.pack("<IIII", MODEL_VERSION, KIND_HDP, model.K, model.V)
    body = (np.ascontiguousarray(model.phi, dtype="<f8").tobytes()
            + np.asarray(model.weights, dtype="<f8").tobytes()
            + np.array([model.alpha, model.gamma, model.eta], dtype="<f8").tobytes())
    Path(path).write_bytes(header + body)


def read_hdp(buf: bytes, path: str | Path = "<buffer>") -> HdpModel:
    version, kind, K, V = struct.unpack_from("<IIII", buf, 4)
    if version != MODEL_VERSION or kind != KIND_HDP:
        raise FormatError(f"{path}: not an HDP model file")
    need = 20 + 8 * (K * V + K + 1 + 3)
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)}")
    arr = np.frombuffer(buf, dtype="<f8", offset=20).astype(np.float64)
    phi = arr[: K * V].reshape(K, V)
    weights = arr[K * V : K * V + K + 1]
    alpha, gamma, eta = arr[-3:]
    return HdpModel(phi, weights, float(alpha), float(gamma), float(eta))


def load_hdp(path: str | Path) -> HdpModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    return read_hdp(buf, path)


def heldout_thetas(model: HdpModel, docs: Sequence[Document], iters: int, burn_in: int, seed: int) -> np.ndarray:
    return np.array([fold_in(model, d, iters, doc_seed(seed, d), burn_in) for d in docs])
