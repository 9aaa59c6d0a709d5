"""Evaluation protocol: per-domain AUC and accuracies, pooled S-AUC, M-ACC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    domain_id: int = 0


def _arrays(scored) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(scored, tuple) and len(scored) == 3 and isinstance(scored[0], np.ndarray):
        s, y, d = scored
        return np.asarray(s, np.float64), np.asarray(y, np.int64), np.asarray(d, np.int64)
    scored = list(scored)
    s = np.array([x.score for x in scored], dtype=np.float64)
    y = np.array([x.label for x in scored], dtype=np.int64)
    d = np.array([x.domain_id for x in scored], dtype=np.int64)
    return s, y, d


def tied_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0
    return avg[inverse]


def auc_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one fake and one real sample")
    r = tied_ranks(scores)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scored: Iterable[ScoredSample]) -> float:
    """Probability that a random fake outscores a random real (ties count half).

    Mann-Whitney rank form, O(n log n).
    """
    s, y, _ = _arrays(scored)
    return auc_arrays(s, y)


def acc_split_arrays(scores, labels, threshold: float = 0.5) -> tuple[float | None, float | None]:
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    pred_fake = scores >= threshold
    fake, real = labels == 1, labels == 0
    f_acc = float(pred_fake[fake].mean()) if fake.any() else None
    r_acc = float((~pred_fake[real]).mean()) if real.any() else None
    return f_acc, r_acc


def acc_split(scored: Iterable[ScoredSample], threshold: float = 0.5) -> tuple[float | None, float | None]:
    """(F-ACC, R-ACC) at ``threshold``. A score equal to the threshold is
    predicted fake. A class with no samples yields ``None``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s, y, _ = _arrays(scored)
    return acc_split_arrays(s, y, threshold)


def mean_acc(f_acc: float | None, r_acc: float | None) -> float | None:
    vals = [v for v in (f_acc, r_acc) if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class DomainMetrics:
    auc: float | None
    f_acc: float | None
    r_acc: float | None
    n_fake: int
    n_real: int

    @property
    def acc(self) -> float | None:
        return mean_acc(self.f_acc, self.r_acc)


@dataclass
class MetricsReport:
    per_domain: dict[int, DomainMetrics]
    s_auc: float | None
    m_acc: float | None
    threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    @property
    def mean_domain_auc(self) -> float:
        vals = [m.auc for m in self.per_domain.values() if m.auc is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "s_auc": self.s_auc,
            "m_acc": self.m_acc,
            "per_domain": {
                str(k): {
                    "auc": m.auc,
                    "f_acc": m.f_acc,
                    "r_acc": m.r_acc,
                    "n_fake": m.n_fake,
                    "n_real": m.n_real,
                }
                for k, m in sorted(self.per_domain.items())
            },
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per = {int(k): DomainMetrics(**v) for k, v in d["per_domain"].items()}
        return cls(per, d["s_auc"], d["m_acc"], d["threshold"], d.get("extra", {}))

    def to_text(self) -> str:
        # repr-exact floats, sorted keys
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _safe_auc(s, y) -> float | None:
    try:
        return auc_arrays(s, y)
    except UndefinedMetricError:
        return None


def summarize(scored, threshold: float = 0.5) -> MetricsReport:
    """Per-domain AUC/F-ACC/R-ACC, pooled S-AUC and M-ACC.

    ``scored`` is an iterable of ``ScoredSample`` or a
    ``(scores, labels, domain_ids)`` array triple.
    """
    s, y, d = _arrays(scored)
    if len(s) == 0:
        raise ValueError("nothing to summarize")
    per = {}
    for dom in sorted(set(d.tolist())):
        m = d == dom
        f_acc, r_acc = acc_split_arrays(s[m], y[m], threshold)
        per[int(dom)] = DomainMetrics(_safe_auc(s[m], y[m]), f_acc, r_acc, int((y[m] == 1).sum()), int((y[m] == 0).sum()))
    accs = [m.acc for m in per.values() if m.acc is not None]
    m_acc = float(np.mean(accs)) if accs else None
    return MetricsReport(per, _safe_auc(s, y), m_acc, threshold)


def scored_samples(scores: Sequence[float], labels: Sequence[int], domains: Sequence[int]) -> list[ScoredSample]:
    return [ScoredSample(float(a), int(b), int(c)) for a, b, c in zip(scores, labels, domains)]
