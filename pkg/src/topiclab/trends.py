"""Meta-topic prevalence over time."""
from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ConfigurationError
from .corpus import Corpus
from .metrics import TopicModelView

MISCELLANEOUS = "miscellaneous"


@dataclass
class MetaTopicMap:
    names: list[str]
    assignment: dict[int, str]

    def indicator(self, K: int) -> np.ndarray:
        """K x n_labels 0/1 matrix: column j selects the topics carrying ``names[j]``."""
        m = np.zeros((K, len(self.names)))
        col = {name: j for j, name in enumerate(self.names)}
        for k, label in self.assignment.items():
            m[k, col[label]] = 1.0
        return m


@dataclass
class TrendSeries:
    meta_topic: str
    points: list[tuple[int, float]]


def parse_meta_map(text: str, model_K: int, source: str = "<meta-map>") -> MetaTopicMap:
    """Parse ``topic_id = label`` lines; ``#`` starts a comment.

    Every topic id in 0..K-1 must appear exactly once.
    """
    names: list[str] = []
    assignment: dict[int, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, label = line.partition("=")
        key, label = key.strip(), label.strip()
        if not sep or not label or not re.fullmatch(r"\d+", key):
            raise ConfigurationError(f"{source}:{lineno}: expected 'topic_id = label'")
        k = int(key)
        if k >= model_K:
            raise ConfigurationError(f"{source}:{lineno}: topic {k} out of range for K={model_K}")
        if k in assignment:
            raise ConfigurationError(f"{source}:{lineno}: topic {k} assigned twice")
        assignment[k] = label
        if label not in names:
            names.append(label)
    missing = [k for k in range(model_K) if k not in assignment]
    if missing:
        raise ConfigurationError(f"topic {missing[0]} unassigned" + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    return MetaTopicMap(names, assignment)


def load_meta_map(path: str | Path, model_K: int) -> MetaTopicMap:
    return parse_meta_map(Path(path).read_text("utf-8"), model_K, str(path))


def prevalence_series(view: TopicModelView, test: Corpus, meta_map: MetaTopicMap) -> list[TrendSeries]:
    """Per-day mean of each meta-topic's summed topic probability.

    Days without documents are simply absent from the series.
    """
    if not test.documents:
        raise ConfigurationError("empty corpus")
    thetas = view.infer_all(test.documents)
    mass = thetas @ meta_map.indicator(view.K)
    by_day: dict[int, list[int]] = defaultdict(list)
    for i, doc in enumerate(test.documents):
        by_day[doc.day_index].append(i)
    days = sorted(by_day)
    means = np.array([mass[by_day[day]].mean(axis=0) for day in days])
    return [
        TrendSeries(name, [(day, float(means[i, j])) for i, day in enumerate(days)])
        for j, name in enumerate(meta_map.names)
    ]


def format_series(series: TrendSeries) -> str:
    lines = ["x, y"] + [f"{float(x):.6f},{y:.6f}" for x, y in series.points]
    return "\n".join(lines) + "\n"


def series_filename(label: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_")
    return (slug or "meta_topic") + ".csv"


def write_series(series: Sequence[TrendSeries], outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in series:
        p = outdir / series_filename(s.meta_topic)
        if p in paths:
            raise ConfigurationError(f"labels collide on file name {p.name}")
        p.write_text(format_series(s), encoding="utf-8")
        paths.append(p)
    return paths
