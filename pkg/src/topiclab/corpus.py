"""Tweet preprocessing, vocabulary construction and the corpus container.

The pipeline applied to every raw document is, in order: lowercase,
tokenize, lemmatize, drop short tokens, drop stop-words. Documents with no
surviving tokens are discarded.
"""
from __future__ import annotations

import datetime as dt
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy import sparse

from . import ConfigurationError, FormatError, IngestError

DEFAULT_MIN_LEN = 3
DEFAULT_MIN_COUNT = 5

_URL_RE = re.compile(r"https?://\S+")
# hashtags and mentions keep their prefix (and underscores); everything else
# splits on any non-alphanumeric character
_TOKEN_RE = re.compile(r"[#@]\w+|[^\W_]+")

_CORPUS_MAGIC = b"TLC1"
_CORPUS_VERSION = 1


@dataclass(frozen=True)
class RawDocument:
    id: str
    text: str
    timestamp: dt.datetime
    author_id: str


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: np.ndarray
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens) or len(self.counts) != len(self.tokens):
            raise ConfigurationError("vocabulary tokens must be unique and have one count each")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self.tokens == other.tokens and np.array_equal(self.counts, other.counts)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Map tokens to ids, silently dropping out-of-vocabulary ones."""
        return [self.index[t] for t in tokens if t in self.index]


@dataclass
class Document:
    id: str
    token_ids: np.ndarray
    day_index: int

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.token_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Document):
            return NotImplemented
        return (
            self.id == other.id
            and self.day_index == other.day_index
            and np.array_equal(self.token_ids, other.token_ids)
        )


@dataclass
class Corpus:
    vocabulary: Vocabulary
    documents: list[Document]
    start_date: dt.date

    def __post_init__(self):
        self.documents = sorted(self.documents, key=lambda d: (d.day_index, d.id))

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    @property
    def n_tokens(self) -> int:
        return int(sum(len(d) for d in self.documents))

    @property
    def V(self) -> int:
        return len(self.vocabulary)

    def bow_matrix(self) -> sparse.csr_matrix:
        """Documents-by-vocabulary count matrix."""
        return bow_matrix(self.documents, self.V)

    def statistics(self) -> dict:
        n = len(self.documents)
        return {
            "documents": n,
            "vocabulary_size": self.V,
            "tokens": self.n_tokens,
            "tokens_per_document": self.n_tokens / n if n else 0.0,
            "days": len({d.day_index for d in self.documents}),
        }


# ---------------------------------------------------------------- pipeline


def default_lemmatizer(token: str) -> str:
    """Identity, except a single plural ``s`` is stripped from tokens longer than 4.

    Tokens ending in ``ss`` are left alone so that the rule is idempotent.
    """
    if len(token) > 4 and token.endswith("s") and not token.endswith("ss"):
        return token[:-1]
    return token


def tokenize(text: str) -> list[str]:
    text = _URL_RE.sub(" ", text)
    return _TOKEN_RE.findall(text)


def preprocess_text(
    text: str,
    stopwords: set[str] | frozenset[str],
    lemmatizer: Callable[[str], str] | Mapping[str, str] | None = None,
    min_len: int = DEFAULT_MIN_LEN,
) -> list[str] | None:
    if min_len < 1:
        raise ConfigurationError("min_len must be >= 1")
    if lemmatizer is None:
        lemmatize = default_lemmatizer
    elif isinstance(lemmatizer, Mapping):
        lemmatize = lambda tok: lemmatizer.get(tok, tok)  # noqa: E731
    else:
        lemmatize = lemmatizer
    tokens = [lemmatize(tok) for tok in tokenize(text.lower())]
    tokens = [tok for tok in tokens if len(tok) >= min_len and tok not in stopwords]
    return tokens or None


def preprocess_document(
    raw: RawDocument,
    stopwords: set[str] | frozenset[str],
    lemmatizer: Callable[[str], str] | Mapping[str, str] | None = None,
    min_len: int = DEFAULT_MIN_LEN,
) -> list[str] | None:
    """Run the five-step pipeline on one document; ``None`` if nothing survives."""
    _check_utf8(raw.text, raw.id)
    return preprocess_text(raw.text, stopwords, lemmatizer, min_len)


def _check_utf8(text: str, doc_id: str) -> None:
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise IngestError(f"document {doc_id!r}: malformed UTF-8 ({exc.reason})") from None


def build_vocabulary(token_lists: Iterable[Sequence[str]], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Keep tokens occurring at least ``min_count`` times.

    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    counter: Counter[str] = Counter()
    for toks in token_lists:
        counter.update(toks)
    kept = [(tok, c) for tok, c in counter.items() if c >= min_count]
    if not kept:
        raise ConfigurationError(f"no token reaches min_count={min_count}; vocabulary would be empty")
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary([t for t, _ in kept], np.array([c for _, c in kept], dtype=np.int64))


def build_corpus(
    raws: Sequence[RawDocument],
    stopwords: set[str] | frozenset[str],
    lemmatizer: Callable[[str], str] | Mapping[str, str] | None = None,
    min_len: int = DEFAULT_MIN_LEN,
    min_count: int = DEFAULT_MIN_COUNT,
) -> Corpus:
    """Preprocess raw documents, build the vocabulary and encode every document.

    Documents left empty after vocabulary filtering are dropped as well.
    """
    if not raws:
        raise ConfigurationError("no input documents")
    seen: set[str] = set()
    processed: list[tuple[RawDocument, list[str]]] = []
    for raw in raws:
        if raw.id in seen:
            raise IngestError(f"duplicate document id {raw.id!r}")
        seen.add(raw.id)
        toks = preprocess_document(raw, stopwords, lemmatizer, min_len)
        if toks is not None:
            processed.append((raw, toks))
    if not processed:
        raise ConfigurationError("every document was emptied by preprocessing")
    vocab = build_vocabulary((toks for _, toks in processed), min_count)
    start = min(_utc_date(raw.timestamp) for raw, _ in processed)
    docs = []
    for raw, toks in processed:
        ids = vocab.encode(toks)
        if ids:
            docs.append(Document(raw.id, np.array(ids), (_utc_date(raw.timestamp) - start).days))
    return Corpus(vocab, docs, start)


def _utc_date(ts: dt.datetime) -> dt.date:
    if ts.tzinfo is not None:
        ts = ts.astimezone(dt.timezone.utc)
    return ts.date()


def split_corpus(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Sample a held-out split without replacement; both halves share the vocabulary."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie strictly between 0 and 1")
    n = len(corpus.documents)
    if n < 2:
        raise ConfigurationError("cannot split a corpus with fewer than 2 documents")
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(seed)
    test_idx = set(rng.choice(n, size=n_test, replace=False).tolist())
    train = [d for i, d in enumerate(corpus.documents) if i not in test_idx]
    test = [d for i, d in enumerate(corpus.documents) if i in test_idx]
    return (
        Corpus(corpus.vocabulary, train, corpus.start_date),
        Corpus(corpus.vocabulary, test, corpus.start_date),
    )


def to_bow(doc: Document, V: int) -> dict[int, int]:
    """Sparse count vector of a document as ``{word_id: count}``."""
    ids, counts = np.unique(doc.token_ids, return_counts=True)
    if len(ids) and ids[-1] >= V:
        raise ConfigurationError(f"token id {ids[-1]} out of range for V={V}")
    return {int(i): int(c) for i, c in zip(ids, counts)}


def bow_matrix(docs: Sequence[Document], V: int) -> sparse.csr_matrix:
    indptr = np.zeros(len(docs) + 1, dtype=np.int64)
    np.cumsum([len(d) for d in docs], out=indptr[1:])
    indices = np.concatenate([d.token_ids for d in docs]) if docs else np.zeros(0, dtype=np.int64)
    data = np.ones(len(indices), dtype=np.float64)
    m = sparse.csr_matrix((data, indices, indptr), shape=(len(docs), V))
    m.sum_duplicates()
    return m


# ---------------------------------------------------------------------- io


def parse_timestamp(value: str) -> dt.datetime:
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    return dt.datetime.fromisoformat(value)


def read_jsonl(path: str | Path) -> list[RawDocument]:
    """Read ``{"id", "text", "timestamp", "user"}`` objects, one per line."""
    docs = []
    with open(path, "rb") as fh:
        for lineno, raw_line in enumerate(fh, 1):
            if not raw_line.strip():
                continue
            try:
                line = raw_line.decode("utf-8")
            except UnicodeDecodeError:
                doc_id = _salvage_id(raw_line, lineno)
                raise IngestError(f"document {doc_id!r}: malformed UTF-8 on line {lineno}") from None
            try:
                obj = json.loads(line)
                doc = RawDocument(
                    id=str(obj["id"]),
                    text=obj["text"],
                    timestamp=parse_timestamp(obj["timestamp"]),
                    author_id=str(obj.get("user", "")),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestError(f"line {lineno}: cannot parse record ({exc})") from None
            _check_utf8(doc.text, doc.id)
            docs.append(doc)
    return docs


def _salvage_id(raw_line: bytes, lineno: int) -> str:
    try:
        obj = json.loads(raw_line.decode("utf-8", errors="replace"))
        return str(obj["id"])
    except Exception:
        return f"<line {lineno}>"


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """One lowercase token per line; ``None`` loads the bundled default list."""
    if path is None:
        text = resources.files("topiclab").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#"))


def load_lemmas(path: str | Path) -> dict[str, str]:
    """TSV ``surface<TAB>lemma`` table."""
    table = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestError(f"{path}:{lineno}: expected 'surface<TAB>lemma'")
        table[parts[0].strip().lower()] = parts[1].strip().lower()
    return table


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the TLC1 container.

    Layout (little-endian): magic ``TLC1``, u32 version, u32 V, u32 n_docs,
    i32 start-date ordinal; V x (u32 len, utf-8 token, i64 count); then per
    document (u32 len, utf-8 id, i32 day_index, u32 n_tokens, n_tokens x u32).
    """
    parts = [
        _CORPUS_MAGIC,
        struct.pack("<IIIi", _CORPUS_VERSION, corpus.V, len(corpus.documents), corpus.start_date.toordinal()),
    ]
    for tok, count in zip(corpus.vocabulary.tokens, corpus.vocabulary.counts):
        parts.append(_pack_str(tok))
        parts.append(struct.pack("<q", int(count)))
    for doc in corpus.documents:
        parts.append(_pack_str(doc.id))
        parts.append(struct.pack("<iI", doc.day_index, len(doc.token_ids)))
        parts.append(np.asarray(doc.token_ids, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_corpus(path: str | Path) -> Corpus:
    buf = Path(path).read_bytes()
    if buf[:4] != _CORPUS_MAGIC:
        raise FormatError(f"{path}: not a corpus file (bad magic)")
    try:
        version, V, n_docs, ordinal = struct.unpack_from("<IIIi", buf, 4)
        if version != _CORPUS_VERSION:
            raise FormatError(f"{path}: unsupported corpus version {version}")
        pos = 20
        tokens, counts = [], []
        for _ in range(V):
            (n,) = struct.unpack_from("<I", buf, pos)
            tokens.append(buf[pos + 4 : pos + 4 + n].decode("utf-8"))
            pos += 4 + n
            counts.append(struct.unpack_from("<q", buf, pos)[0])
            pos += 8
        docs = []
        for _ in range(n_docs):
            (n,) = struct.unpack_from("<I", buf, pos)
            doc_id = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            day, n_tok = struct.unpack_from("<iI", buf, pos)
            pos += 8
            ids = np.frombuffer(buf, dtype="<u4", count=n_tok, offset=pos).astype(np.int64)
            pos += 4 * n_tok
            docs.append(Document(doc_id, ids, day))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated corpus file ({exc})") from None
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return Corpus(Vocabulary(tokens, np.array(counts, dtype=np.int64)), docs, dt.date.fromordinal(ordinal))
