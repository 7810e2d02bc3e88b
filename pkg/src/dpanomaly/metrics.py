"""Anomaly scores, detection rules and evaluation metrics.

Conventions:

* AUROC is the trapezoidal area under (FPR, TPR) over all distinct score
  thresholds, with tied scores entering the curve together.
* AUPR is average precision: sum over distinct thresholds of
  ``(recall_t - recall_{t-1}) * precision_t`` (step interpolation).
* Top-k ranks break probability ties by ascending token id.
* Ratios with a zero denominator are NaN, never 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

HIGHER = "higher-is-anomalous"
LOWER = "lower-is-anomalous"


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    score: float
    positive: bool
    direction: str = HIGHER


@dataclass(frozen=True)
class Scores:
    """Column view of a record set with one shared direction."""

    ids: np.ndarray
    scores: np.ndarray
    truth: np.ndarray  # bool, True = anomaly / poison
    direction: str = HIGHER

    def __post_init__(self):
        if self.direction not in (HIGHER, LOWER):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not (len(self.ids) == len(self.scores) == len(self.truth)):
            raise ValueError("ids, scores and truth must align")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def oriented(self) -> np.ndarray:
        """Scores flipped so that larger always means more anomalous."""
        return self.scores if self.direction == HIGHER else -self.scores

    def records(self) -> list[ScoreRecord]:
        return [ScoreRecord(str(i), float(s), bool(t), self.direction) for i, s, t in zip(self.ids, self.scores, self.truth)]


def as_scores(records) -> Scores:
    if isinstance(records, Scores):
        return records
    records = list(records)
    dirs = {r.direction for r in records}
    if len(dirs) > 1:
        raise ValueError("record set mixes score directions")
    return Scores(
        np.array([r.id for r in records]),
        np.array([r.score for r in records], dtype=np.float64),
        np.array([r.positive for r in records], dtype=bool),
        dirs.pop() if dirs else HIGHER,
    )


def make_scores(scores, truth, ids=None, direction: str = HIGHER) -> Scores:
    scores = np.asarray(scores, dtype=np.float64)
    if ids is None:
        ids = np.arange(len(scores)).astype(str)
    return Scores(np.asarray(ids), scores, np.asarray(truth, dtype=bool), direction)


def score_losses(model, x, y=None, truth=None, ids=None, kind: str | None = None) -> Scores:
    """Per-sample model loss as an anomaly score (higher is more anomalous)."""
    losses = model.losses(x, y, kind)
    truth = np.zeros(len(losses), dtype=bool) if truth is None else truth
    return make_scores(losses, truth, ids, HIGHER)


# -- detection rules -----------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predicted, truth) -> ConfusionCounts:
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    return ConfusionCounts(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))


def threshold_detect(records, tau: float) -> ConfusionCounts:
    """Positive iff score >= tau (higher-is-anomalous) or score < tau (lower-is-anomalous)."""
    s = as_scores(records)
    if math.isnan(tau):
        raise ValueError("threshold must not be NaN")
    flagged = s.scores >= tau if s.direction == HIGHER else s.scores < tau
    return confusion(flagged, s.truth)


@dataclass(frozen=True)
class TopKVerdict:
    k: int
    candidates: tuple[int, ...]
    actual: int
    anomalous: bool


def ranked_tokens(dist) -> np.ndarray:
    """Token ids by descending probability, ties by ascending id."""
    p = np.asarray(dist, dtype=np.float64)
    return np.lexsort((np.arange(len(p)), -p))


def topk_detect(dist, actual: int, k: int) -> TopKVerdict:
    p = np.asarray(dist, dtype=np.float64)
    v = len(p)
    if not 1 <= k <= v:
        raise ValueError(f"k must lie in [1, {v}], got {k}")
    if not 0 <= actual < v:
        raise ValueError(f"token {actual} outside a vocabulary of {v}")
    top = tuple(int(t) for t in ranked_tokens(p)[:k])
    return TopKVerdict(k, top, int(actual), int(actual) not in top)


def token_ranks(probs: np.ndarray, actual: np.ndarray) -> np.ndarray:
    """0-based rank of each actual token under the top-k ordering (batched).

    An entry is anomalous at k exactly when its rank is >= k.
    """
    probs = np.asarray(probs, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.int64)
    pa = probs[np.arange(len(actual)), actual][:, None]
    ids = np.arange(probs.shape[1])[None, :]
    ahead = (probs > pa) | ((probs == pa) & (ids < actual[:, None]))
    return ahead.sum(axis=1)


def aggregate_session(entry_verdicts) -> bool:
    """A session is abnormal iff at least one entry is abnormal."""
    verdicts = list(entry_verdicts)
    if not verdicts:
        raise ValueError("empty session")
    return any(bool(getattr(v, "anomalous", v)) for v in verdicts)


def session_max(values, owner, n_sessions: int, fill: float = -np.inf) -> np.ndarray:
    """Per-session maximum of entry-level values (``owner`` maps entry -> session)."""
    out = np.full(n_sessions, fill, dtype=np.float64)
    np.maximum.at(out, owner, np.asarray(values, dtype=np.float64))
    return out


# -- summary statistics ----------------------------------------------------------


def _ratio(a: float, b: float) -> float:
    return a / b if b else math.nan


def confusion_stats(c: ConfusionCounts) -> dict[str, float]:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if math.isnan(precision) or math.isnan(recall) or precision + recall == 0:
        f = math.nan
    else:
        # harmonic mean of precision and recall, written on counts so exact ratios stay exact
        f = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    return {
        "precision": precision,
        "recall": recall,
        "f_measure": f,
        "tpr": recall,
        "tnr": _ratio(c.tn, c.tn + c.fp),
        "fpr": _ratio(c.fp, c.fp + c.tn),
    }


@dataclass(frozen=True)
class Curve:
    x: np.ndarray
    y: np.ndarray
    area: float

    def to_csv(self, x_name: str, y_name: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([x_name, y_name])
        for a, b in zip(self.x, self.y):
            w.writerow([repr(float(a)), repr(float(b))])
        return buf.getvalue()


def _threshold_counts(s: Scores) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Cumulative TP and FP at each distinct threshold, highest first."""
    pos = int(s.truth.sum())
    neg = len(s) - pos
    if pos == 0 or neg == 0:
        raise ValueError("need at least one positive and one negative")
    score = s.oriented
    order = np.argsort(-score, kind="mergesort")
    sorted_s, sorted_t = score[order], s.truth[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(sorted_s)), len(sorted_s) - 1]
    tp = np.cumsum(sorted_t)[last_of_group]
    fp = (last_of_group + 1) - tp
    return tp, fp, pos, neg


def auroc(records) -> Curve:
    tp, fp, pos, neg = _threshold_counts(as_scores(records))
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return Curve(fpr, tpr, area)


def aupr(records) -> Curve:
    tp, fp, pos, _ = _threshold_counts(as_scores(records))
    precision = tp / (tp + fp)
    recall = tp / pos
    area = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return Curve(recall, precision, area)


def safe_area(fn, records) -> float:
    """Area or NaN when the record set has a single class."""
    try:
        return fn(records).area
    except ValueError:
        return math.nan
