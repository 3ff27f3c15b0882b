"""Evaluation metrics for decile-token predictions.

Degenerate inputs (constant series, classes without positives, empty
high-severity subsets) produce :data:`UNDEFINED` rather than NaN or an
exception, so a batch report never crashes half-way.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.stats import kendalltau, rankdata

N_CLASSES = 10


class EvaluationError(ValueError):
    pass


class _Undefined:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "UNDEFINED"

    def __bool__(self):
        return False


UNDEFINED = _Undefined()


@dataclass(frozen=True)
class EvalRecord:
    true_token: int  # 1..10
    pred_token: int  # 1..10
    pred_probs: tuple[float, ...]
    true_continuous: float
    pred_continuous: float

    def __post_init__(self):
        p = np.asarray(self.pred_probs, dtype=np.float64)
        if p.shape != (N_CLASSES,):
            raise EvaluationError("pred_probs must hold 10 probabilities")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise EvaluationError("pred_probs must be non-negative and sum to 1")
        if not (1 <= self.true_token <= N_CLASSES and 1 <= self.pred_token <= N_CLASSES):
            raise EvaluationError("tokens are quantile levels 1..10")


def make_record(true_token: int, probs, true_cont: float, pred_cont: float) -> EvalRecord:
    """Record whose predicted token is the argmax of ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    return EvalRecord(int(true_token), int(np.argmax(probs)) + 1, tuple(probs.tolist()),
                      float(true_cont), float(pred_cont))


def _arrays(records: Sequence[EvalRecord]):
    t = np.array([r.true_token for r in records], dtype=np.int64)
    p = np.array([r.pred_token for r in records], dtype=np.int64)
    return t, p


# -- continuous ----------------------------------------------------------
def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0.0:
        return UNDEFINED
    return float(dx @ dy) / den


def continuous_metrics(records: Sequence[EvalRecord]) -> dict:
    if not records:
        raise EvaluationError("no records to evaluate")
    t = np.array([r.true_continuous for r in records])
    p = np.array([r.pred_continuous for r in records])
    err = p - t
    return {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err * err))),
            "pearson": pearson(t, p) if len(records) >= 2 else UNDEFINED}


# -- ordinal -------------------------------------------------------------
def severity_weights(true_tokens, kappa: float = 1.0) -> np.ndarray:
    """w(k) = exp(kappa * (k - 1) / 9): Q1 -> 1, Q10 -> e^kappa."""
    return np.exp(kappa * (np.asarray(true_tokens, dtype=np.float64) - 1.0) / 9.0)


def ordinal_metrics(records: Sequence[EvalRecord], kappa: float = 1.0) -> dict:
    if not records:
        raise EvaluationError("no records to evaluate")
    t, p = _arrays(records)
    w = severity_weights(t, kappa)
    diff = np.abs(p - t).astype(np.float64)
    out = {"weighted_mae": float(np.sum(w * diff) / np.sum(w)),
           "weighted_mse": float(np.sum(w * diff * diff) / np.sum(w)),
           "token_mae": float(np.mean(diff))}
    if len(records) < 2:
        out.update(kendall_tau=UNDEFINED, spearman_rho=UNDEFINED)
        return out
    tau = kendalltau(t, p, variant="b").statistic
    out["kendall_tau"] = UNDEFINED if not np.isfinite(tau) else float(tau)
    out["spearman_rho"] = pearson(rankdata(t), rankdata(p))
    return out


def margin_analysis(records: Sequence[EvalRecord]) -> dict:
    if not records:
        raise EvaluationError("no records to evaluate")
    t, p = _arrays(records)
    d = np.abs(p - t)
    return {"exact_acc": float(np.mean(d == 0)), "off_by_1": float(np.mean(d <= 1)),
            "off_by_2": float(np.mean(d <= 2)), "off_by_3": float(np.mean(d <= 3))}


# -- AUC -----------------------------------------------------------------
def rank_auc(scores, labels):
    """Mann-Whitney AUC with average ranks for ties; UNDEFINED without both classes."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_metrics(records: Sequence[EvalRecord]) -> dict:
    if not records:
        raise EvaluationError("no records to evaluate")
    t, _ = _arrays(records)
    probs = np.array([r.pred_probs for r in records])
    per = [rank_auc(probs[:, k], t == k + 1) for k in range(N_CLASSES)]
    support = [int(np.sum(t == k + 1)) for k in range(N_CLASSES)]
    defined = [k for k in range(N_CLASSES) if per[k] is not UNDEFINED]
    if not defined:
        raise EvaluationError("AUC is undefined for every class")
    macro = float(np.mean([per[k] for k in defined]))
    sw = np.array([support[k] for k in defined], dtype=np.float64)
    weighted = float(np.sum(sw * np.array([per[k] for k in defined])) / sw.sum())
    return {"per_token_auc": per, "macro_auc": macro, "weighted_auc": weighted, "support": support,
            "undefined_classes": [k + 1 for k in range(N_CLASSES) if per[k] is UNDEFINED]}


# -- high severity -------------------------------------------------------
def high_severity_metrics(records: Sequence[EvalRecord], cont_threshold: float = 7.0, token_floor: int = 8) -> dict:
    cont = [r for r in records if r.true_continuous > cont_threshold]
    tok = [r for r in records if r.true_token >= token_floor]
    out = {"hs_cont_mae": UNDEFINED, "hs_token_mae": UNDEFINED, "hs_accuracy": UNDEFINED,
           "hs_error_histogram": UNDEFINED, "hs_cont_count": len(cont), "hs_token_count": len(tok)}
    if cont:
        out["hs_cont_mae"] = float(np.mean([abs(r.pred_continuous - r.true_continuous) for r in cont]))
    if tok:
        t, p = _arrays(tok)
        out["hs_token_mae"] = float(np.mean(np.abs(p - t)))
        out["hs_accuracy"] = float(np.mean(p == t))
        errs = p - t
        out["hs_error_histogram"] = {str(e): int(c) for e, c in zip(*np.unique(errs, return_counts=True))}
    return out


# -- report --------------------------------------------------------------
def evaluate(records: Sequence[EvalRecord], kappa: float = 1.0, cont_threshold: float = 7.0,
             token_floor: int = 8) -> dict:
    if not records:
        raise EvaluationError("no records to evaluate")
    return {"n_records": len(records),
            "continuous": continuous_metrics(records),
            "ordinal": ordinal_metrics(records, kappa),
            "margin": margin_analysis(records),
            "auc": auc_metrics(records),
            "high_severity": high_severity_metrics(records, cont_threshold, token_floor)}


def _tag(v):
    if v is UNDEFINED:
        return {"defined": False, "value": None}
    if isinstance(v, list):
        return {"defined": True, "value": [_tag(x) for x in v]}
    return {"defined": True, "value": v}


def report_json(report: dict) -> str:
    """JSON with every metric value wrapped as ``{"defined": bool, "value": ...}``."""
    tagged = {k: (v if not isinstance(v, dict) else {m: _tag(x) for m, x in v.items()})
              for k, v in report.items()}
    return json.dumps(tagged, indent=2, sort_keys=True)


def report_schema() -> dict:
    return json.loads(resources.files("clinseq").joinpath("report.schema.json").read_text(encoding="utf-8"))


def report_table(report: dict) -> str:
    """Aligned plain-text rendering of the scalar metrics."""
    rows = []
    for section in ("continuous", "ordinal", "margin", "auc", "high_severity"):
        for key, v in report[section].items():
            if isinstance(v, (list, dict)):
                continue
            rows.append((f"{section}.{key}", "undefined" if v is UNDEFINED else f"{v:.4f}"
                         if isinstance(v, float) else str(v)))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v:>10}" for k, v in rows) + "\n"


# -- CSV -----------------------------------------------------------------
RECORD_HEADER = ["true_token", "pred_token"] + [f"p{k}" for k in range(1, N_CLASSES + 1)] + ["true_cont", "pred_cont"]


def records_to_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow([r.true_token, r.pred_token, *[repr(x) for x in r.pred_probs],
                    repr(r.true_continuous), repr(r.pred_continuous)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[EvalRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != RECORD_HEADER:
        raise EvaluationError(f"record CSV header must be {','.join(RECORD_HEADER)}")
    out = []
    for row in reader:
        if row:
            vals = [float(x) for x in row]
            out.append(EvalRecord(int(vals[0]), int(vals[1]), tuple(vals[2:12]), vals[12], vals[13]))
    return out
