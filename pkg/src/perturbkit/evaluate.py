"""Benchmark reports: per-condition fit, rank metrics, and collapse diagnosis.

evaluate() joins predicted and observed condition aggregates, scores them, and
returns a MetricReport that write_report() serializes as summary.tsv,
per_condition.tsv, two similarity matrices and report.json. Predictions read
back from an aggregates file produce the same report as in-memory ones, so
externally generated predictions can be scored identically.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from collections.abc import Sequence

import numpy as np

from .dataset import Condition, fmt_float
from .errors import UsageError, ValidationError
from .metrics import (RANK_SCOPES, SimilarityMatrix, composite_objective,
                      fit_metric, matrix_distance, rank_metric,
                      similarity_matrix, transposed_rank_metric)
from .preprocess import ConditionAggregate

MEAN_METRICS = ("rmse", "mae", "mse", "r2", "pearson")
COLLAPSE_RANK_THRESHOLD = 0.35
COLLAPSE_MATRIX_RMS = 0.4


def condition_string(cond: Condition, delimiter: str = "+") -> str:
    parts = [cond.label(delimiter)]
    parts += [f"{k}={v}" for k, v in cond.covariates]
    return "|".join(parts)


def match_conditions(preds: Sequence[ConditionAggregate],
                     obs: Sequence[ConditionAggregate],
                     control_value: str = "control"):
    """Inner join on condition equality, in observation order.

    Controls are dropped from both sides first. Returns (matched predictions,
    matched observations, unmatched prediction conditions, unmatched
    observation conditions).
    """
    preds = [a for a in preds if not a.condition.is_control(control_value)]
    obs = [a for a in obs if not a.condition.is_control(control_value)]
    by_cond = {}
    for a in preds:
        if a.condition in by_cond:
            raise ValidationError(f"duplicate prediction for "
                                  f"{condition_string(a.condition)}")
        by_cond[a.condition] = a
    seen_obs = set()
    for a in obs:
        if a.condition in seen_obs:
            raise ValidationError(f"duplicate observation for "
                                  f"{condition_string(a.condition)}")
        seen_obs.add(a.condition)
    matched_p, matched_o = [], []
    unmatched_obs = []
    for o in obs:
        p = by_cond.pop(o.condition, None)
        if p is None:
            unmatched_obs.append(o.condition)
        else:
            matched_p.append(p)
            matched_o.append(o)
    unmatched_pred = [a.condition for a in preds if a.condition in by_cond]
    return matched_p, matched_o, unmatched_pred, unmatched_obs


@dataclasses.dataclass
class MetricReport:
    per_condition: list[dict]
    macro: dict
    diagnostics: dict
    provenance: dict
    sim_pred: SimilarityMatrix | None
    sim_obs: SimilarityMatrix | None


def _try_fit(kind, a, b):
    try:
        return fit_metric(kind, a, b)
    except UsageError:
        return math.nan


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=float)
    if np.all(np.isnan(arr)):
        return math.nan
    return float(np.nanmean(arr))


def evaluate(preds: Sequence[ConditionAggregate],
             obs: Sequence[ConditionAggregate],
             rank_scope: str = "global", control_value: str = "control",
             provenance: dict | None = None) -> MetricReport:
    """Score predictions against observed aggregates.

    Mean-vector metrics (rmse, mae, mse, r2, pearson) are computed per matched
    condition and averaged ignoring NaN; cosine is computed on LogFC vectors.
    Rank metrics run in both directions and under both distances when LogFC is
    available. The composite objective pairs macro RMSE with the rmse_mean
    rank average.
    """
    if rank_scope not in RANK_SCOPES:
        raise UsageError(f"unknown rank scope {rank_scope!r}")
    matched_p, matched_o, un_p, un_o = match_conditions(preds, obs, control_value)
    if not matched_p:
        raise ValidationError("no overlapping conditions between predictions "
                              "and observations")
    n = len(matched_p)
    have_logfc = all(a.logfc is not None for a in matched_p + matched_o)

    rows = []
    for p, o in zip(matched_p, matched_o):
        row = {"condition": p.condition,
               "n_cells_pred": int(p.n_cells), "n_cells_obs": int(o.n_cells)}
        for kind in MEAN_METRICS:
            row[kind] = _try_fit(kind, p.mean_lognorm, o.mean_lognorm)
        row["cosine_lfc"] = (_try_fit("cosine", p.logfc, o.logfc)
                             if have_logfc else math.nan)
        rows.append(row)

    ranks = {}
    for direction, fn in (("rank", rank_metric),
                          ("transposed_rank", transposed_rank_metric)):
        for dist in ("rmse_mean", "cosine_lfc"):
            key = f"{direction}_{'rmse' if dist == 'rmse_mean' else 'cosine'}"
            if n < 2 or (dist == "cosine_lfc" and not have_logfc):
                ranks[key] = (np.full(n, math.nan), math.nan)
                continue
            try:
                ranks[key] = fn(matched_p, matched_o, dist_kind=dist,
                                scope=rank_scope)
            except UsageError:
                ranks[key] = (np.full(n, math.nan), math.nan)
    for key, (per_cond, _) in ranks.items():
        for row, value in zip(rows, per_cond):
            row[key] = float(value)

    macro = {kind: _nanmean([r[kind] for r in rows])
             for kind in MEAN_METRICS + ("cosine_lfc",)}
    for key, (_, avg) in ranks.items():
        macro[f"{key}_average"] = float(avg)
    rank_avg = macro["rank_rmse_average"]
    macro["objective"] = (composite_objective(macro["rmse"], rank_avg)
                          if not math.isnan(rank_avg) else math.nan)

    sim_pred = sim_obs = None
    if have_logfc and n >= 2:
        sim_pred = similarity_matrix(matched_p)
        sim_obs = similarity_matrix(matched_o)
        macro["matrix_distance"] = matrix_distance(sim_pred, sim_obs)
        valid = ~(np.isnan(sim_pred.values) | np.isnan(sim_obs.values))
        n_valid = int(valid.sum())
        macro["matrix_rms"] = (float(macro["matrix_distance"] / np.sqrt(n_valid))
                               if n_valid else math.nan)
    else:
        macro["matrix_distance"] = math.nan
        macro["matrix_rms"] = math.nan

    diagnostics = {
        "n_conditions": n,
        "n_unmatched_predictions": len(un_p),
        "n_unmatched_observations": len(un_o),
        "unmatched_predictions": [condition_string(c) for c in un_p],
        "unmatched_observations": [condition_string(c) for c in un_o],
        "has_logfc": have_logfc,
        "rank_scope": rank_scope,
        "nan_counts": {k: int(np.sum(np.isnan([r[k] for r in rows])))
                       for k in MEAN_METRICS + ("cosine_lfc",)},
    }
    return MetricReport(per_condition=rows, macro=macro, diagnostics=diagnostics,
                        provenance=dict(provenance or {}),
                        sim_pred=sim_pred, sim_obs=sim_obs)


# ---------------------------------------------------------------------------
# collapse diagnosis


def diagnose_collapse(preds: Sequence[ConditionAggregate],
                      obs: Sequence[ConditionAggregate],
                      rank_scope: str = "global",
                      control_value: str = "control") -> dict:
    """Check the three collapse signatures and give a verdict.

    A collapsed predictor returns nearly the same vector everywhere, which (a)
    pushes the rank average toward 1 because every foreign prediction ties,
    (b) pushes the transposed rank average up the same way, and (c) flattens
    the predicted similarity matrix toward 1 while the observed one keeps its
    structure. Verdicts: every available signal on = "collapse signal", none =
    "no collapse signal", otherwise "mixed signal".
    """
    report = evaluate(preds, obs, rank_scope=rank_scope,
                      control_value=control_value)
    rank_avg = report.macro["rank_rmse_average"]
    t_avg = report.macro["transposed_rank_rmse_average"]
    rms = report.macro["matrix_rms"]
    signals = {}
    if not math.isnan(rank_avg):
        signals["rank"] = rank_avg >= COLLAPSE_RANK_THRESHOLD
    if not math.isnan(t_avg):
        signals["transposed_rank"] = t_avg >= COLLAPSE_RANK_THRESHOLD
    if not math.isnan(rms):
        signals["similarity_matrix"] = rms >= COLLAPSE_MATRIX_RMS
    if not signals:
        raise UsageError("not enough conditions to diagnose collapse")
    on = sum(signals.values())
    verdict = ("collapse signal" if on == len(signals)
               else "no collapse signal" if on == 0 else "mixed signal")
    return {"rank_average": rank_avg, "transposed_rank_average": t_avg,
            "matrix_distance": report.macro["matrix_distance"],
            "matrix_rms": rms, "signals": signals, "verdict": verdict}


# ---------------------------------------------------------------------------
# serialization


def _cell(v) -> str:
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def _json_safe(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) or math.isinf(obj) else obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _json_safe(float(obj))
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_similarity(sim: SimilarityMatrix, path: str, delimiter: str) -> None:
    labels = [condition_string(c, delimiter) for c in sim.labels]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(["condition"] + labels) + "\n")
        for label, row in zip(labels, sim.values):
            f.write("\t".join([label] + [fmt_float(v) for v in row]) + "\n")


def write_report(report: MetricReport, out_dir: str, delimiter: str = "+") -> list[str]:
    """Write summary.tsv, per_condition.tsv, similarity matrices and report.json."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "summary.tsv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric\tvalue\n")
        for key in sorted(report.macro):
            f.write(f"{key}\t{_cell(report.macro[key])}\n")
        for key in ("n_conditions", "n_unmatched_predictions",
                    "n_unmatched_observations"):
            f.write(f"{key}\t{report.diagnostics[key]}\n")
    written.append(path)

    cov_keys = [k for k, _ in report.per_condition[0]["condition"].covariates]
    for row in report.per_condition:
        if [k for k, _ in row["condition"].covariates] != cov_keys:
            raise ValidationError("conditions mix different covariate key sets")
    metric_cols = list(MEAN_METRICS) + ["cosine_lfc", "rank_rmse", "rank_cosine",
                                        "transposed_rank_rmse",
                                        "transposed_rank_cosine"]
    path = os.path.join(out_dir, "per_condition.tsv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(["perturbation", *cov_keys, "n_cells_pred",
                           "n_cells_obs", *metric_cols]) + "\n")
        for row in report.per_condition:
            cond = row["condition"]
            fields = [cond.label(delimiter)]
            fields += [v for _, v in cond.covariates]
            fields += [str(row["n_cells_pred"]), str(row["n_cells_obs"])]
            fields += [_cell(row[m]) for m in metric_cols]
            f.write("\t".join(fields) + "\n")
    written.append(path)

    for sim, name in ((report.sim_pred, "similarity_matrix_pred.tsv"),
                      (report.sim_obs, "similarity_matrix_obs.tsv")):
        if sim is not None:
            path = os.path.join(out_dir, name)
            _write_similarity(sim, path, delimiter)
            written.append(path)

    payload = {
        "macro": _json_safe(report.macro),
        "diagnostics": _json_safe(report.diagnostics),
        "provenance": _json_safe(report.provenance),
        "per_condition": [
            dict(_json_safe({k: v for k, v in row.items() if k != "condition"}),
                 condition=condition_string(row["condition"], delimiter))
            for row in report.per_condition
        ],
    }
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    written.append(path)
    return written
