"""Reliability-evaluation machinery: confusion metrics, selective-prediction
curves, error-binned accuracy with buffer regions, calibration, and the
ensemble-sigma / majority-class baselines.

Conventions: the positive class (1) is "unreliable" throughout. Undefined
statistics (empty subsets, zero variance) are reported as None together
with a reason, never as NaN.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError

DEFAULT_CUTOFFS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_metrics(labels, predicted) -> dict:
    """Accuracy, MCC, and F1 with unreliable (1) as the positive class.

    MCC is defined as 0 when any denominator factor vanishes; F1 is 0
    when precision and recall are both undefined or zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if labels.shape != predicted.shape:
        raise DataError(f"label/prediction length mismatch: {labels.shape} vs {predicted.shape}")
    if labels.size == 0:
        raise DataError("confusion_metrics: empty input")
    tp = int(np.sum((labels == 1) & (predicted == 1)))
    fp = int(np.sum((labels == 0) & (predicted == 1)))
    tn = int(np.sum((labels == 0) & (predicted == 0)))
    fn = int(np.sum((labels == 1) & (predicted == 0)))
    counts = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
    accuracy = (tp + tn) / counts.total
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = 0.0 if denom == 0 else (tp * tn - fp * fn) / np.sqrt(denom)
    f1_denom = 2 * tp + fp + fn
    f1 = 0.0 if f1_denom == 0 else 2 * tp / f1_denom
    return {"accuracy": accuracy, "mcc": float(mcc), "f1": float(f1), "counts": counts}


@dataclass
class SelectivePoint:
    """Metrics on the high-confidence subset at one probability cutoff."""

    cutoff: float
    coverage: float
    n_covered: int
    accuracy: float | None = None
    mcc: float | None = None
    f1: float | None = None
    mean_err_reliable: float | None = None
    mean_err_unreliable: float | None = None
    note: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def selective_curve(probs, labels, errors,
                    cutoffs=DEFAULT_CUTOFFS) -> list[SelectivePoint]:
    """Coverage / quality tradeoff as the confidence cutoff rises.

    A molecule is covered at cutoff c iff its max class probability is at
    least c; its high-confidence label is the argmax class. Mean errors
    are |error| averaged over the HC-reliable and HC-unreliable subsets.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    errors = np.abs(np.asarray(errors, dtype=np.float64))
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise DataError("selective_curve: probability rows must sum to 1")
    conf = probs.max(axis=1)
    preds = probs.argmax(axis=1)
    n = len(labels)
    points = []
    for c in cutoffs:
        covered = conf >= c
        n_cov = int(covered.sum())
        point = SelectivePoint(cutoff=float(c), coverage=n_cov / n, n_covered=n_cov)
        if n_cov == 0:
            point.note = "no molecules covered at this cutoff"
            points.append(point)
            continue
        cm = confusion_metrics(labels[covered], preds[covered])
        point.accuracy, point.mcc, point.f1 = cm["accuracy"], cm["mcc"], cm["f1"]
        rel = covered & (preds == 0)
        unrel = covered & (preds == 1)
        if rel.any():
            point.mean_err_reliable = float(errors[rel].mean())
        if unrel.any():
            point.mean_err_unreliable = float(errors[unrel].mean())
        if not rel.any() or not unrel.any():
            point.note = "one HC class empty; its mean error is undefined"
        points.append(point)
    return points


@dataclass
class ErrorBin:
    lo: float
    hi: float
    count: int
    accuracy: float
    buffer: bool
    hc_accuracy: dict = field(default_factory=dict)  # cutoff -> accuracy | None


def error_binned_accuracy(probs, labels, errors, n_bins: int = 50,
                          accurate_threshold: float = 0.7,
                          hc_cutoffs=(0.7, 0.9)) -> list[ErrorBin]:
    """Equal-count bins over |error| with overall and HC-subset accuracy.

    A bin is flagged as buffer when its overall accuracy falls below the
    threshold (the ambiguous region around the class boundary).
    """
    if n_bins < 2:
        raise ConfigError("error_binned_accuracy: n_bins must be >= 2")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    errors = np.abs(np.asarray(errors, dtype=np.float64))
    n = len(labels)
    if n < n_bins:
        warnings.warn(f"only {n} samples for {n_bins} bins; reducing bin count")
        n_bins = max(1, n)
    conf = probs.max(axis=1)
    preds = probs.argmax(axis=1)
    order = np.argsort(errors, kind="stable")
    bins = []
    for chunk in np.array_split(order, n_bins):
        acc = float((preds[chunk] == labels[chunk]).mean())
        hc = {}
        for c in hc_cutoffs:
            sub = chunk[conf[chunk] >= c]
            hc[float(c)] = float((preds[sub] == labels[sub]).mean()) if len(sub) else None
        bins.append(ErrorBin(lo=float(errors[chunk].min()), hi=float(errors[chunk].max()),
                             count=len(chunk), accuracy=acc,
                             buffer=acc < accurate_threshold, hc_accuracy=hc))
    return bins


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mean_prob: float | None
    frac_unreliable: float | None


def calibration(probs_unreliable, labels, n_bins: int = 10) -> dict:
    """Equal-width reliability bins over P(unreliable), plus ECE and Brier."""
    p = np.asarray(probs_unreliable, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.min() < 0.0 or p.max() > 1.0:
        raise DataError("calibration: probabilities outside [0, 1]")
    n = len(p)
    idx = np.clip((p * n_bins).astype(int), 0, n_bins - 1)
    bins = []
    ece = 0.0
    for k in range(n_bins):
        sel = idx == k
        count = int(sel.sum())
        lo, hi = k / n_bins, (k + 1) / n_bins
        if count == 0:
            bins.append(CalibrationBin(lo=lo, hi=hi, count=0, mean_prob=None,
                                       frac_unreliable=None))
            continue
        mean_prob = float(p[sel].mean())
        frac = float(y[sel].mean())
        ece += (count / n) * abs(mean_prob - frac)
        bins.append(CalibrationBin(lo=lo, hi=hi, count=count, mean_prob=mean_prob,
                                   frac_unreliable=frac))
    brier = float(((p - y) ** 2).mean())
    return {"bins": bins, "ece": float(ece), "brier": brier}


# ---------------------------------------------------------------------------
# baselines


@dataclass
class EnsembleInput:
    """Per-molecule energy predictions from K independently trained models."""

    predictions: np.ndarray        # (K, n) kcal/mol
    n_atoms: np.ndarray            # (n,)
    mol_ids: np.ndarray | None = None
    e_ref: np.ndarray | None = None

    def validate(self) -> None:
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        if self.predictions.ndim != 2 or self.predictions.shape[0] < 2:
            raise DataError("ensemble input needs predictions shaped (K >= 2, n)")
        if len(self.n_atoms) != self.predictions.shape[1]:
            raise DataError("ensemble input: n_atoms length mismatch")


def average_ranks(x) -> np.ndarray:
    """Ranks 1..n with ties assigned the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float | None:
    """Spearman rank correlation (average ranks for ties); None when either
    input has zero rank variance."""
    ra, rb = average_ranks(a), average_ranks(b)
    va = ra - ra.mean()
    vb = rb - rb.mean()
    denom = np.sqrt((va * va).sum() * (vb * vb).sum())
    if denom == 0.0:
        return None
    return float((va * vb).sum() / denom)


def ensemble_baseline(ens: EnsembleInput, errors_single, labels) -> dict:
    """Score ensemble disagreement as a reliability signal.

    The scaled spread is the sample standard deviation across members
    divided by sqrt(atom count). Reports its Spearman correlation with
    the single-model |error| and the confusion metrics of the classifier
    "unreliable iff scaled sigma >= its median".
    """
    ens.validate()
    errors_single = np.abs(np.asarray(errors_single, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if len(errors_single) != ens.predictions.shape[1] or len(labels) != len(errors_single):
        raise DataError("ensemble_baseline: molecule set sizes are inconsistent")
    sigma = ens.predictions.std(axis=0, ddof=1)
    scaled = sigma / np.sqrt(np.asarray(ens.n_atoms, dtype=np.float64))
    rho = spearman_rho(scaled, errors_single)
    note = None if rho is not None else "scaled sigma has zero variance; rank correlation undefined"
    median = float(np.median(scaled))
    preds = (scaled >= median).astype(np.int64)
    return {
        "scaled_sigma": scaled,
        "spearman_rho": rho,
        "spearman_note": note,
        "median_threshold": median,
        "median_classifier": confusion_metrics(labels, preds),
    }


def majority_baseline(labels) -> float:
    """Accuracy of always predicting the more frequent class."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    frac1 = labels.mean()
    return float(max(frac1, 1.0 - frac1))


# ---------------------------------------------------------------------------
# report assembly and emission


def build_report(probs, labels, errors, cutoffs=DEFAULT_CUTOFFS,
                 calibration_bins: int = 10, error_bins: int = 50,
                 hc_cutoffs=(0.7, 0.9), extra: dict | None = None) -> dict:
    """Assemble every evaluation section into one JSON-ready dict."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = probs.argmax(axis=1)
    overall = confusion_metrics(labels, preds)
    report = {
        "tool_version": __version__,
        "n_molecules": int(len(labels)),
        "label_fractions": {"reliable": float((labels == 0).mean()),
                            "unreliable": float((labels == 1).mean())},
        "overall": {"accuracy": overall["accuracy"], "mcc": overall["mcc"],
                    "f1": overall["f1"], "counts": asdict(overall["counts"])},
        "majority_baseline_accuracy": majority_baseline(labels),
        "selective": [p.to_dict() for p in
                      selective_curve(probs, labels, errors, cutoffs)] if len(cutoffs) else [],
        "calibration": None,
        "error_bins": [],
    }
    cal = calibration(probs[:, 1], labels, n_bins=calibration_bins)
    report["calibration"] = {"ece": cal["ece"], "brier": cal["brier"],
                             "bins": [asdict(b) for b in cal["bins"]]}
    if len(labels) >= 2:
        bins = error_binned_accuracy(probs, labels, errors,
                                     n_bins=min(error_bins, len(labels)),
                                     hc_cutoffs=hc_cutoffs)
        report["error_bins"] = [
            {"lo": b.lo, "hi": b.hi, "count": b.count, "accuracy": b.accuracy,
             "buffer": b.buffer,
             "hc_accuracy": {str(k): v for k, v in b.hc_accuracy.items()}}
            for b in bins]
    if extra:
        report.update(extra)
    return report


def _fmt(value, pct=False, digits=3) -> str:
    if value is None:
        return "n/a"
    if pct:
        return f"{100.0 * value:.1f}%"
    return f"{value:.{digits}f}"


def format_table(selective_points: list[dict]) -> str:
    """Human-readable selective-prediction table."""
    header = f"{'Cutoff':<12}{'Coverage':>10}{'Acc.':>8}{'MCC':>8}{'F1':>8}" \
             f"{'e_rel':>8}{'e_unrel':>9}"
    lines = [header, "-" * len(header)]
    for p in selective_points:
        lines.append(
            f"{'P >= ' + format(p['cutoff'], '.2f'):<12}"
            f"{_fmt(p['coverage'], pct=True):>10}"
            f"{_fmt(p['accuracy'], pct=True):>8}"
            f"{_fmt(p['mcc']):>8}"
            f"{_fmt(p['f1']):>8}"
            f"{_fmt(p['mean_err_reliable'], digits=2):>8}"
            f"{_fmt(p['mean_err_unreliable'], digits=2):>9}")
    return "\n".join(lines)


def emit_report(report: dict, out_dir, stem: str = "report") -> dict:
    """Write the JSON report, a human-readable table, and plot-data CSVs.

    Returns the paths written. JSON uses canonical (sorted) key order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    paths["json"] = json_path

    txt_path = out / f"{stem}.txt"
    lines = [f"# probe {report.get('tool_version', __version__)}",
             f"molecules: {report.get('n_molecules')}"]
    overall = report.get("overall")
    if overall:
        lines.append(f"overall: acc {_fmt(overall['accuracy'], pct=True)}, "
                     f"MCC {_fmt(overall['mcc'])}, F1 {_fmt(overall['f1'])}")
    cal = report.get("calibration")
    if cal:
        lines.append(f"calibration: ECE {_fmt(cal['ece'])}, Brier {_fmt(cal['brier'])}")
    lines.append(f"majority baseline: {_fmt(report.get('majority_baseline_accuracy'), pct=True)}")
    lines.append("")
    if report.get("selective"):
        lines.append(format_table(report["selective"]))
    txt_path.write_text("\n".join(lines) + "\n")
    paths["table"] = txt_path

    sel_path = out / f"{stem}_selective.csv"
    with open(sel_path, "w", newline="") as fh:
        fh.write(f"# probe {__version__}\n")
        writer = csv.writer(fh)
        writer.writerow(["cutoff", "coverage", "accuracy", "mcc", "f1",
                         "mean_err_reliable", "mean_err_unreliable"])
        for p in report.get("selective", []):
            writer.writerow([p["cutoff"], p["coverage"], p["accuracy"], p["mcc"],
                             p["f1"], p["mean_err_reliable"], p["mean_err_unreliable"]])
    paths["selective_csv"] = sel_path

    bins_path = out / f"{stem}_error_bins.csv"
    with open(bins_path, "w", newline="") as fh:
        fh.write(f"# probe {__version__}\n")
        writer = csv.writer(fh)
        hc_keys = sorted({k for b in report.get("error_bins", [])
                          for k in b["hc_accuracy"]})
        writer.writerow(["lo", "hi", "count", "accuracy", "buffer"]
                        + [f"hc_{k}" for k in hc_keys])
        for b in report.get("error_bins", []):
            writer.writerow([b["lo"], b["hi"], b["count"], b["accuracy"], b["buffer"]]
                            + [b["hc_accuracy"].get(k) for k in hc_keys])
    paths["error_bins_csv"] = bins_path

    cal_path = out / f"{stem}_calibration.csv"
    with open(cal_path, "w", newline="") as fh:
        fh.write(f"# probe {__version__}\n")
        writer = csv.writer(fh)
        writer.writerow(["lo", "hi", "count", "mean_prob", "frac_unreliable"])
        for b in (report.get("calibration") or {}).get("bins", []):
            writer.writerow([b["lo"], b["hi"], b["count"], b["mean_prob"],
                             b["frac_unreliable"]])
    paths["calibration_csv"] = cal_path
    return paths
