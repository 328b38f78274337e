"""Alarm rules, threshold calibration, detection metrics and the rolling
one-week-ahead evaluation.

A county raises an alarm when its hotspot probability is strictly above its
threshold. Thresholds come from a grid search over ``{0.00, 0.01, ..., 1.00}``
maximizing the in-sample F1 score; ties go to the largest threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import atomic_write_text
from .errors import DataError

__all__ = [
    "THRESHOLD_GRID",
    "ThresholdVector",
    "DetectionReport",
    "WeekResult",
    "calibrate_thresholds",
    "detect",
    "confusion",
    "precision_recall_f1",
    "prf_from_sets",
    "rolling_evaluate",
    "model_predictor",
    "oracle_predictor",
    "constant_predictor",
    "write_report_csv",
    "write_summary_json",
]

log = logging.getLogger(__name__)

THRESHOLD_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass
class ThresholdVector:
    """Per-county thresholds; ``flagged`` marks counties without positives."""

    zeta: np.ndarray
    flagged: np.ndarray

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, float)
        self.flagged = np.asarray(self.flagged, bool)
        if np.any((self.zeta < 0) | (self.zeta > 1)):
            raise ValueError("thresholds must lie in [0, 1]")


def _f1(tp, fp, fn):
    # 2 tp / (2 tp + fp + fn) is one correctly rounded division, so
    # mathematically equal scores compare equal and the tie rule is exact
    den = 2 * tp + fp + fn
    return np.where(den > 0, 2 * tp / np.maximum(den, 1), 0.0)


def calibrate_thresholds(probs, h, grid=THRESHOLD_GRID):
    """Grid-search each county's threshold on its in-sample F1.

    ``probs`` and ``h`` are ``(I, T)``. Counties with no positive label get
    ``zeta = 1`` (never alarm) and are flagged.
    """
    probs = np.asarray(probs, float)
    h = np.asarray(h).astype(bool)
    if probs.shape != h.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs labels {h.shape}")
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    grid = np.asarray(grid, float)
    alarms = probs[:, None, :] > grid[None, :, None]  # (I, G, T)
    tp = np.sum(alarms & h[:, None, :], axis=2)
    fp = np.sum(alarms & ~h[:, None, :], axis=2)
    fn = np.sum(~alarms & h[:, None, :], axis=2)
    f1 = _f1(tp, fp, fn)
    # largest grid index attaining the row maximum
    best = f1.shape[1] - 1 - np.argmax(f1[:, ::-1], axis=1)
    zeta = grid[best]
    flagged = ~h.any(axis=1)
    zeta[flagged] = 1.0
    if flagged.any():
        log.info("%d counties have no positive labels; their threshold is 1.0", int(flagged.sum()))
    return ThresholdVector(zeta, flagged)


def detect(probs, thresholds):
    """``alarm[i, t] = probs[i, t] > zeta[i]``."""
    zeta = thresholds.zeta if isinstance(thresholds, ThresholdVector) else np.asarray(thresholds)
    probs = np.asarray(probs, float)
    if probs.shape[0] != len(zeta):
        raise ValueError(f"{probs.shape[0]} rows of probabilities for {len(zeta)} thresholds")
    return probs > (zeta[:, None] if probs.ndim == 2 else zeta)


def confusion(alarms, truth):
    alarms = np.asarray(alarms, bool)
    truth = np.asarray(truth, bool)
    tp = int(np.sum(alarms & truth))
    return {"tp": tp, "fp": int(np.sum(alarms & ~truth)),
            "fn": int(np.sum(~alarms & truth)), "tn": int(np.sum(~alarms & ~truth))}


def precision_recall_f1(tp, fp, fn):
    """Precision, recall and F1 from confusion counts (empty sets give 0)."""
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def prf_from_sets(U, V):
    """Metrics for truth set ``U`` and detected set ``V``."""
    U, V = set(U), set(V)
    tp = len(U & V)
    return precision_recall_f1(tp, len(V) - tp, len(U) - tp)


# ---------------------------------------------------------------------------
# Rolling evaluation
# ---------------------------------------------------------------------------


@dataclass
class WeekResult:
    week: int
    prob: np.ndarray
    threshold: np.ndarray
    alarm: np.ndarray
    truth: np.ndarray
    precision: float
    recall: float
    f1: float
    sq_err: np.ndarray | None = None
    covered: np.ndarray | None = None


@dataclass
class DetectionReport:
    weeks: list = field(default_factory=list)
    fips: tuple = ()
    label: str = "stgp"

    @property
    def counts(self):
        alarms = np.concatenate([w.alarm for w in self.weeks]) if self.weeks else np.zeros(0, bool)
        truth = np.concatenate([w.truth for w in self.weeks]) if self.weeks else np.zeros(0, bool)
        return confusion(alarms, truth)

    @property
    def metrics(self):
        c = self.counts
        return precision_recall_f1(c["tp"], c["fp"], c["fn"])

    @property
    def precision(self):
        return self.metrics[0]

    @property
    def recall(self):
        return self.metrics[1]

    @property
    def f1(self):
        return self.metrics[2]

    @property
    def rmse(self):
        errs = [w.sq_err for w in self.weeks if w.sq_err is not None]
        return float(np.sqrt(np.mean(np.concatenate(errs)))) if errs else None

    @property
    def coverage(self):
        cov = [w.covered for w in self.weeks if w.covered is not None]
        return float(np.mean(np.concatenate(cov))) if cov else None

    def summary(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "rmse": self.rmse, "coverage": self.coverage}


class _Predictor:
    """Protocol: ``fit(last_week)`` then ``insample(last_week)`` and ``predict(week)``.

    ``predict`` returns ``(probs, case)`` where ``case`` is ``None`` or a
    tuple ``(mean_std, lower_std, upper_std, truth_std)`` of length-``I`` arrays.
    """


def oracle_predictor(panel):
    """Injects the true labels as probabilities."""

    class Oracle(_Predictor):
        def fit(self, last_week):
            pass

        def insample(self, last_week):
            return panel.hotspots[:, :last_week].astype(float), 0

        def predict(self, week):
            return panel.hotspots[:, week - 1].astype(float), None

    return Oracle()


def constant_predictor(panel, value=0.5):
    class Constant(_Predictor):
        def fit(self, last_week):
            pass

        def insample(self, last_week):
            return np.full((panel.I, last_week), value), 0

        def predict(self, week):
            return np.full(panel.I, value), None

    return Constant()


def model_predictor(model, panel, refresh_steps=20, refresh_gamma=None, reinit_inducing=True):
    """Wraps a trained model: ``q(u)`` is refreshed on all data up to each
    forecast origin (kernel and mean fixed), thresholds are calibrated on the
    in-sample posterior probabilities."""
    from .train import forecast, refresh_posterior

    class ModelPredictor(_Predictor):
        current = None

        def fit(self, last_week):
            self.current = refresh_posterior(model, panel, last_week, steps=refresh_steps,
                                             gamma=refresh_gamma,
                                             reinit_inducing=reinit_inducing)

        def insample(self, last_week):
            first = model.lag_depth + 1
            fc = forecast(self.current, panel, np.arange(first, last_week + 1))
            return fc.prob, first - 1

        def predict(self, week):
            fc = forecast(self.current, panel, [week])
            return fc.prob[:, 0], (fc.mean_std[:, 0], fc.lower_std[:, 0], fc.upper_std[:, 0],
                                   fc.truth_std[:, 0])

    return ModelPredictor()


def rolling_evaluate(predictor, panel, holdout_weeks, label="stgp", lag_depth=2):
    """One-week-ahead evaluation over the 1-based ``holdout_weeks``.

    For each week ``t + 1`` the predictor is fitted on weeks ``<= t``,
    thresholds are calibrated on its in-sample probabilities for those weeks,
    and week ``t + 1`` is predicted and scored. Weeks without enough history
    are skipped with a warning.
    """
    report = DetectionReport(fips=tuple(panel.fips), label=label)
    for week in sorted(set(int(w) for w in holdout_weeks)):
        if week < lag_depth + 2 or week > panel.T:
            log.warning("skipping week %d: insufficient history or outside the panel", week)
            continue
        t = week - 1
        predictor.fit(t)
        probs_in, offset = predictor.insample(t)
        truth_in = panel.hotspots[:, offset:t]
        thresholds = calibrate_thresholds(np.clip(probs_in, 0.0, 1.0), truth_in)
        prob, case = predictor.predict(week)
        prob = np.clip(prob, 0.0, 1.0)
        alarm = detect(prob, thresholds)
        truth = panel.hotspots[:, week - 1].astype(bool)
        p, r, f1 = precision_recall_f1(**{k: v for k, v in confusion(alarm, truth).items()
                                          if k != "tn"})
        wr = WeekResult(week, prob, thresholds.zeta, alarm, truth, p, r, f1)
        if case is not None:
            mean, lo, hi, y = case
            wr.sq_err = (mean - y) ** 2
            wr.covered = (y >= lo) & (y <= hi)
        report.weeks.append(wr)
        log.info("week %d: precision %.3f recall %.3f f1 %.3f", week, p, r, f1)
    if not report.weeks:
        raise DataError("no holdout week could be evaluated")
    return report


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def report_rows(report, with_model=False):
    header = ["week", "fips", "prob", "threshold", "alarm", "truth"]
    if with_model:
        header.append("model")
    rows = []
    for w in report.weeks:
        for i, fips in enumerate(report.fips):
            row = [str(w.week), fips, repr(float(w.prob[i])), repr(float(w.threshold[i])),
                   str(int(w.alarm[i])), str(int(w.truth[i]))]
            if with_model:
                row.append(report.label)
            rows.append(row)
    return header, rows


def write_report_csv(reports, path):
    """Write one or several reports; several reports add a ``model`` column."""
    reports = reports if isinstance(reports, (list, tuple)) else [reports]
    with_model = len(reports) > 1 or reports[0].label != "stgp"
    lines = []
    for k, rep in enumerate(reports):
        header, rows = report_rows(rep, with_model)
        if k == 0:
            lines.append(",".join(header))
        lines.extend(",".join(r) for r in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_summary_json(summary, path):
    atomic_write_text(path, json.dumps(summary, sort_keys=True, indent=2) + "\n")

