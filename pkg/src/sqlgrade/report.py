"""Prediction CSVs and the metrics JSON document.

Both ``sqlgrade xval`` and ``sqlgrade metrics`` build their report through
:func:`metrics_report` from the same float values that the predictions CSV
stores (``repr`` round-trips exactly), so recomputing offline reproduces the
original document byte for byte.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .data import DataError, Remark, SubmissionRecord, csv_writer
from .metrics import (
    UndefinedMetricError,
    balanced_accuracy,
    confusion,
    precision_recall,
    rank_mistakes,
    regression_report,
    roc_auc,
)
from .model import Prediction

PRED_COLUMNS = (
    "submission_id",
    "p_correct",
    "p_remark_correct",
    "p_remark_partial",
    "p_remark_uninterp",
    "p_remark_cheating",
    "grade_hat",
    "grade_hat_percent",
    "bottleneck_x",
    "bottleneck_y",
    "remark_argmax",
)
REMARK_PROB_COLUMNS = PRED_COLUMNS[2:6]


def prediction_row(submission_id: str, pred: Prediction, fold: int | None = None) -> dict:
    row = {
        "submission_id": submission_id,
        "p_correct": pred.p_correct,
        **dict(zip(REMARK_PROB_COLUMNS, pred.remark_probs)),
        "grade_hat": pred.grade_hat,
        "grade_hat_percent": 100.0 * pred.grade_hat,
        "bottleneck_x": pred.bottleneck_xy[0],
        "bottleneck_y": pred.bottleneck_xy[1] if len(pred.bottleneck_xy) > 1 else 0.0,
        "remark_argmax": pred.remark_argmax,
    }
    if fold is not None:
        row["fold"] = fold
    return row


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_predictions(rows: list[dict], fh) -> None:
    with_fold = bool(rows) and "fold" in rows[0]
    cols = PRED_COLUMNS + (("fold",) if with_fold else ())
    w = csv_writer(fh)
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])


def read_predictions(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing prediction column(s) {', '.join(missing)}")
        for raw in reader:
            row = {"submission_id": raw["submission_id"], "remark_argmax": raw["remark_argmax"]}
            try:
                for c in PRED_COLUMNS[1:-1]:
                    row[c] = float(raw[c])
                if raw.get("fold") not in (None, ""):
                    row["fold"] = int(raw["fold"])
            except ValueError as exc:
                raise DataError(f"{path}: line {reader.line_num}: {exc}") from None
            rows.append(row)
    return rows


def align(records: list[SubmissionRecord], rows: list[dict]) -> list[dict]:
    """Predictions reordered to match ``records``; any missing id is an error."""
    by_id = {r["submission_id"]: r for r in rows}
    missing = [rec.submission_id for rec in records if rec.submission_id not in by_id]
    if missing:
        raise DataError(f"{len(missing)} submission id(s) have no prediction", missing)
    return [by_id[rec.submission_id] for rec in records]


def _maybe(fn):
    try:
        return fn()
    except UndefinedMetricError:
        return None


def _summary(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "var": None, "min": None, "max": None, "n": 0}
    a = np.asarray(values)
    return {"mean": float(a.mean()), "std": float(a.std()), "var": float(a.var()), "min": float(a.min()), "max": float(a.max()), "n": len(values)}


def metrics_report(records: list[SubmissionRecord], rows: list[dict], top_k: int = 10) -> dict:
    rows = align(records, rows)
    y_c = np.array([int(r.is_correct) for r in records])
    p_c = np.array([row["p_correct"] for row in rows])
    remark_probs = np.array([[row[c] for c in REMARK_PROB_COLUMNS] for row in rows])
    remark_true = np.array([r.remark.index for r in records])
    names = [r.value for r in Remark]

    doc: dict = {}
    roc = _maybe(lambda: roc_auc(p_c, y_c))
    doc["roc"] = None if roc is None else {"fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist(), "auc": roc.auc}

    if rows and "fold" in rows[0]:
        folds = []
        for f in sorted({row["fold"] for row in rows}):
            mask = np.array([row["fold"] == f for row in rows])
            auc = _maybe(lambda: roc_auc(p_c[mask], y_c[mask]).auc)
            folds.append({"fold": f, "n_val": int(mask.sum()), "auc": auc})
        doc["folds"] = folds
        doc["fold_auc_summary"] = _summary([f["auc"] for f in folds if f["auc"] is not None])

    cm_c = confusion((p_c >= 0.5).astype(int).tolist(), y_c.tolist(), (0, 1))
    doc["confusion"] = {
        "correctness": {"labels": [0, 1], "matrix": cm_c.counts.tolist()},
    }
    doc["balanced_accuracy"] = _maybe(lambda: balanced_accuracy(cm_c))

    cm_r = confusion(remark_probs.argmax(axis=1).tolist(), remark_true.tolist(), range(len(names)))
    doc["confusion"]["remark"] = {"labels": names, "matrix": cm_r.counts.tolist()}
    doc["remark_balanced_accuracy"] = _maybe(lambda: balanced_accuracy(cm_r))

    pr = {}
    for k, name in enumerate(names):
        curve = _maybe(lambda: precision_recall(remark_probs[:, k], (remark_true == k).astype(int)))
        pr[name] = None if curve is None else {"recall": curve.recall.tolist(), "precision": curve.precision.tolist(), "ap": curve.average_precision}
    doc["pr"] = pr
    aps = [v["ap"] for v in pr.values() if v is not None]
    doc["remark_macro_ap"] = float(np.mean(aps)) if aps else None

    y_g = np.array([r.grade_percent / 100.0 for r in records])
    g_hat = np.array([row["grade_hat"] for row in rows])
    mae, rmse, r2, res = regression_report(y_g, g_hat)
    doc["regression"] = {"mae": mae, "rmse": rmse, "r2": r2}
    doc["residual_histogram"] = {
        "bin_edges": res.bin_edges.tolist(),
        "counts": res.counts.tolist(),
        "mean": res.mean,
        "skewness": res.skewness,
    }

    mistakes = rank_mistakes([r.submission_id for r in records], p_c, y_c)
    as_dict = lambda m: {"submission_id": m.submission_id, "p_correct": m.p_correct, "label": m.label}  # noqa: E731
    doc["mistakes"] = {
        "count": len(mistakes),
        "best": [as_dict(m) for m in mistakes[:top_k]],
        "worst": [as_dict(m) for m in reversed(mistakes[-top_k:])],
    }
    return doc


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_curves(doc: dict, directory) -> None:
    """One CSV per curve, one point per row."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if doc.get("roc"):
        with open(d / "roc.csv", "w", newline="") as fh:
            w = csv_writer(fh)
            w.writerow(["fpr", "tpr"])
            w.writerows(zip(doc["roc"]["fpr"], doc["roc"]["tpr"]))
    for name, curve in doc.get("pr", {}).items():
        if curve is None:
            continue
        slug = name.lower().replace(" ", "_")
        with open(d / f"pr_{slug}.csv", "w", newline="") as fh:
            w = csv_writer(fh)
            w.writerow(["recall", "precision"])
            w.writerows(zip(curve["recall"], curve["precision"]))
