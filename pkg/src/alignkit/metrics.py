"""Correlation metrics and three-way / two-way preference accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .records import TIE, Choice


class UndefinedMetricError(ValueError):
    """The requested statistic has no defined value for this input."""


def _pair(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"inputs must be 1-d and equally long, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise UndefinedMetricError("correlation needs at least two observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs contain non-finite values")
    return x, y


def plcc(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("Pearson correlation is undefined for a constant input")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    start = 0
    while start < x.size:
        stop = start
        while stop + 1 < x.size and sorted_x[stop + 1] == sorted_x[start]:
            stop += 1
        ranks[order[start : stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


def srcc(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y)
    try:
        return plcc(average_ranks(x), average_ranks(y))
    except UndefinedMetricError:
        raise UndefinedMetricError("Spearman correlation is undefined when one input is entirely tied") from None


def krcc(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall tau-b."""
    x, y = _pair(x, y)
    iu = np.triu_indices(x.size, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    untied_x = float(np.count_nonzero(sx))
    untied_y = float(np.count_nonzero(sy))
    if untied_x == 0.0 or untied_y == 0.0:
        raise UndefinedMetricError("Kendall tau-b is undefined when one input is entirely tied")
    return float(np.dot(sx, sy) / np.sqrt(untied_x * untied_y))


Verdict = Union[Choice, str]


@dataclass(frozen=True)
class PairEvalRecord:
    gt_label: str
    pred_score_a: Optional[float] = None
    pred_score_b: Optional[float] = None
    pred_choice: Optional[str] = None

    def __post_init__(self) -> None:
        labels = (Choice.A.value, Choice.B.value, TIE)
        if self.gt_label not in labels:
            raise ValueError(f"ground-truth label must be A, B or tie, got {self.gt_label!r}")
        has_scores = self.pred_score_a is not None and self.pred_score_b is not None
        if not has_scores and self.pred_choice is None:
            raise ValueError("a pair record needs predicted scores or a predicted choice")
        if self.pred_choice is not None and self.pred_choice not in labels:
            raise ValueError(f"predicted choice must be A, B or tie, got {self.pred_choice!r}")

    @property
    def has_scores(self) -> bool:
        return self.pred_score_a is not None and self.pred_score_b is not None

    @property
    def delta(self) -> float:
        if not self.has_scores:
            raise ValueError("record carries no predicted scores")
        return float(self.pred_score_a) - float(self.pred_score_b)


def _two_way(rec: PairEvalRecord) -> str:
    if rec.pred_choice is not None:
        return rec.pred_choice
    d = rec.delta
    return Choice.A.value if d > 0 else Choice.B.value if d < 0 else TIE


def _three_way(delta: float, tau: float) -> str:
    if abs(delta) < tau:
        return TIE
    return Choice.A.value if delta > 0 else Choice.B.value


def fit_tie_threshold(calibration: Sequence[PairEvalRecord]) -> float:
    """Smallest tau maximizing three-way accuracy on the calibration split.

    Only thresholds that change a prediction matter: 0 and the values just
    above each observed |delta| (so that delta itself counts as a tie).
    """
    if not calibration:
        raise ValueError("tie-threshold fitting needs a non-empty calibration split")
    deltas = np.array([r.delta for r in calibration])
    labels = [r.gt_label for r in calibration]
    candidates = sorted({0.0} | {float(np.nextafter(abs(d), np.inf)) for d in deltas})
    best_tau, best_acc = 0.0, -1.0
    for tau in candidates:
        acc = float(np.mean([_three_way(d, tau) == g for d, g in zip(deltas, labels)]))
        if acc > best_acc:
            best_tau, best_acc = tau, acc
    return best_tau


def preference_accuracy(records: Sequence[PairEvalRecord], mode: str,
                        calibration: Optional[Sequence[PairEvalRecord]] = None) -> float:
    """``diff``: two-way accuracy with tied labels dropped.  ``tau``: three-way accuracy with a fitted tie band."""
    if mode == "diff":
        kept = [r for r in records if r.gt_label != TIE]
        if not kept:
            raise ValueError("no non-tie records to score")
        return float(np.mean([_two_way(r) == r.gt_label for r in kept]))
    if mode == "tau":
        if not records:
            raise ValueError("no records to score")
        if calibration is None:
            raise ValueError("tau mode needs a calibration split")
        if not all(r.has_scores for r in records):
            raise ValueError("tau mode needs predicted scores on every record")
        tau = fit_tie_threshold(calibration)
        return float(np.mean([_three_way(r.delta, tau) == r.gt_label for r in records]))
    raise ValueError(f"unknown accuracy mode {mode!r}")


@dataclass
class MetricReport:
    plcc: Optional[float] = None
    srcc: Optional[float] = None
    krcc: Optional[float] = None
    tau_acc: Optional[float] = None
    diff_acc: Optional[float] = None
    tau_threshold: Optional[float] = None
    n: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("plcc", "srcc", "krcc"):
            v = getattr(self, name)
            if v is not None and not -1.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [-1, 1]")
        for name in ("tau_acc", "diff_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_flat(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("n", "extra") and v is not None}
        out.update({f"n_{k}": v for k, v in self.n.items()})
        out.update(self.extra)
        return out


def correlation_report(pred: Sequence[float], truth: Sequence[float]) -> MetricReport:
    return MetricReport(plcc=plcc(pred, truth), srcc=srcc(pred, truth), krcc=krcc(pred, truth), n={"scored": len(pred)})


def pair_report(records: Sequence[PairEvalRecord], calibration: Optional[Sequence[PairEvalRecord]] = None) -> MetricReport:
    """Diff accuracy always; tau accuracy and its threshold when scores and a calibration split exist."""
    counts = {"pairs": len(records), "ties": sum(r.gt_label == TIE for r in records)}
    report = MetricReport(diff_acc=preference_accuracy(records, "diff"), n=counts)
    if calibration is not None and all(r.has_scores for r in list(records) + list(calibration)):
        report.tau_threshold = fit_tie_threshold(calibration)
        report.tau_acc = preference_accuracy(records, "tau", calibration)
        counts["calibration"] = len(calibration)
    return report
