"""Fit-based, rank-based, similarity-matrix, and distributional metrics.

The rank metric scores each condition by the fraction of foreign predictions
at least as close to its observation as its own prediction:

    rank(x_hat_i) = 1/(p-1) * sum_{j != i} I[ dist(x_hat_j, x_i) <= dist(x_hat_i, x_i) ]

0 is perfect, 0.5 is the expected score of predictions unrelated to their
targets, and values near 1 indicate near-ties everywhere (a collapsed
predictor). The transposed variant ranks observations per prediction instead
and is more sensitive to collapse.

Pairwise distances here are accumulated sequentially (cdist / einsum, no BLAS
matmul) so that results are bitwise equal to a plain double-loop evaluation.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import UsageError
from .preprocess import ConditionAggregate

log = logging.getLogger(__name__)

FIT_KINDS = ("rmse", "mae", "mse", "r2", "pearson", "cosine")
DIST_KINDS = ("rmse_mean", "cosine_lfc")
RANK_SCOPES = ("global", "within_covariate")


@dataclasses.dataclass(frozen=True)
class MetricValue:
    name: str
    scope: str  # per-condition | macro
    value: float


def fit_metric(kind: str, a, b) -> float:
    """Scalar agreement between a prediction vector a and a reference vector b.

    r2 treats b as the reference series. cosine follows the plain inner-product
    formula and is deliberately not shift-invariant, unlike pearson.
    """
    if kind not in FIT_KINDS:
        raise UsageError(f"unknown fit metric {kind!r}")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise UsageError(f"length mismatch {a.shape} vs {b.shape}")
    if a.size == 0 or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise UsageError("fit_metric needs non-empty finite vectors")
    if kind in ("r2", "pearson") and a.size < 2:
        raise UsageError(f"{kind} needs vectors of length >= 2")
    if kind == "mse":
        return float(np.mean((a - b) ** 2))
    if kind == "rmse":
        return float(np.sqrt(np.mean((a - b) ** 2)))
    if kind == "mae":
        return float(np.mean(np.abs(a - b)))
    if kind == "r2":
        ss_tot = float(np.sum((b - b.mean()) ** 2))
        if ss_tot == 0:
            raise UsageError("r2 undefined for a zero-variance reference")
        return 1.0 - float(np.sum((a - b) ** 2)) / ss_tot
    if kind == "pearson":
        da, db = a - a.mean(), b - b.mean()
        denom = float(np.sqrt(np.sum(da ** 2) * np.sum(db ** 2)))
        if denom == 0:
            raise UsageError("pearson undefined for a zero-variance input")
        return float(np.sum(da * db)) / denom
    # cosine
    na, nb = float(np.sqrt(np.sum(a * a))), float(np.sqrt(np.sum(b * b)))
    if na == 0 or nb == 0:
        raise UsageError("cosine undefined for a zero-norm vector")
    return float(np.sum(a * b)) / (na * nb)


# ---------------------------------------------------------------------------
# rank metrics


def _vectors(aggs: Sequence[ConditionAggregate], dist_kind: str) -> np.ndarray:
    if dist_kind not in DIST_KINDS:
        raise UsageError(f"unknown distance kind {dist_kind!r}")
    if dist_kind == "rmse_mean":
        return np.stack([a.mean_lognorm for a in aggs])
    for a in aggs:
        if a.logfc is None:
            raise UsageError(f"condition {a.condition.label()} has no LogFC vector")
    vecs = np.stack([a.logfc for a in aggs])
    norms = np.sqrt(np.einsum("ij,ij->i", vecs, vecs))
    if np.any(norms == 0):
        i = int(np.argmax(norms == 0))
        raise UsageError(
            f"zero-norm LogFC for condition {aggs[i].condition.label()}; "
            "cosine distance undefined")
    return vecs


def _cross_distances(pred: np.ndarray, obs: np.ndarray, dist_kind: str) -> np.ndarray:
    """D[i, j] = dist(prediction i, observation j)."""
    if dist_kind == "rmse_mean":
        return np.sqrt(cdist(pred, obs, "sqeuclidean") / pred.shape[1])
    dots = np.einsum("ik,jk->ij", pred, obs)
    np_ = np.sqrt(np.einsum("ik,ik->i", pred, pred))
    no_ = np.sqrt(np.einsum("jk,jk->j", obs, obs))
    return 1.0 - dots / (np_[:, None] * no_[None, :])


def _check_matched(preds, obs):
    if len(preds) != len(obs):
        raise UsageError(f"{len(preds)} predictions vs {len(obs)} observations")
    for p, o in zip(preds, obs):
        if p.condition != o.condition:
            raise UsageError(
                f"condition lists differ: {p.condition} vs {o.condition}")


def _scope_groups(aggs, scope):
    if scope not in RANK_SCOPES:
        raise UsageError(f"unknown rank scope {scope!r}")
    if scope == "global":
        return [np.arange(len(aggs))]
    groups: dict[tuple, list[int]] = {}
    for i, a in enumerate(aggs):
        groups.setdefault(a.condition.covariates, []).append(i)
    return [np.array(g) for _, g in sorted(groups.items())]


def _rank(preds, obs, dist_kind, scope, transposed):
    _check_matched(preds, obs)
    ranks = np.full(len(preds), np.nan)
    group_means = []
    for idx in _scope_groups(preds, scope):
        if len(idx) < 2:
            log.warning("rank metric skipped a group of size 1: %s",
                        preds[idx[0]].condition.label())
            continue
        pv = _vectors([preds[i] for i in idx], dist_kind)
        ov = _vectors([obs[i] for i in idx], dist_kind)
        d = _cross_distances(pv, ov, dist_kind)
        own = np.diagonal(d)
        if transposed:
            hits = (d <= own[:, None]).sum(axis=1) - 1
        else:
            hits = (d <= own[None, :]).sum(axis=0) - 1
        ranks[idx] = hits / (len(idx) - 1)
        group_means.append(float(ranks[idx].mean()))
    if not group_means:
        raise UsageError("rank metric needs at least one group with >= 2 conditions")
    return ranks, float(np.mean(group_means))


def rank_metric(preds: Sequence[ConditionAggregate], obs: Sequence[ConditionAggregate],
                dist_kind: str = "rmse_mean", scope: str = "global"):
    """Per-condition ranks and their average; 0 perfect, 0.5 random.

    Ties count via <=, so exactly identical predictions all score 1.0. With
    scope="within_covariate" ranks are computed inside each covariate group and
    the average is the macro mean over groups.
    """
    return _rank(preds, obs, dist_kind, scope, transposed=False)


def transposed_rank_metric(preds: Sequence[ConditionAggregate],
                           obs: Sequence[ConditionAggregate],
                           dist_kind: str = "rmse_mean", scope: str = "global"):
    """Mirror of rank_metric: ranks observed vectors per prediction."""
    return _rank(preds, obs, dist_kind, scope, transposed=True)


# ---------------------------------------------------------------------------
# similarity matrices


@dataclasses.dataclass
class SimilarityMatrix:
    """Pairwise cosine similarities of LogFC vectors over an ordered condition list.

    Conditions whose LogFC has zero norm are recorded in ``missing`` and their
    rows/columns are NaN.
    """

    labels: list
    values: np.ndarray
    missing: np.ndarray

    @property
    def n(self) -> int:
        return len(self.labels)


def similarity_matrix(aggs: Sequence[ConditionAggregate]) -> SimilarityMatrix:
    if len(aggs) < 2:
        raise UsageError("similarity matrix needs >= 2 conditions")
    for a in aggs:
        if a.logfc is None:
            raise UsageError(f"condition {a.condition.label()} has no LogFC vector")
    vecs = np.stack([a.logfc for a in aggs])
    norms = np.sqrt(np.einsum("ij,ij->i", vecs, vecs))
    missing = norms == 0
    if missing.any():
        log.warning("%d condition(s) with zero-norm LogFC recorded as missing",
                    int(missing.sum()))
    safe = np.where(missing, 1.0, norms)
    dots = np.einsum("ik,jk->ij", vecs, vecs)
    values = dots / (safe[:, None] * safe[None, :])
    values[missing, :] = np.nan
    values[:, missing] = np.nan
    return SimilarityMatrix([a.condition for a in aggs], values, missing)


def matrix_distance(s_pred: SimilarityMatrix, s_obs: SimilarityMatrix) -> float:
    """Frobenius norm of the entrywise difference, missing entries excluded."""
    if s_pred.labels != s_obs.labels:
        raise UsageError("similarity matrices cover different condition lists")
    valid = ~(np.isnan(s_pred.values) | np.isnan(s_obs.values))
    diff = np.where(valid, s_pred.values - s_obs.values, 0.0)
    return float(np.sqrt(np.sum(diff * diff)))


# ---------------------------------------------------------------------------
# distributional two-sample metrics


def distributional_metric(kind: str, cells_a, cells_b) -> float:
    """Unbiased two-sample distance between cell populations.

    mmd_rbf uses a Gaussian kernel with the median pairwise distance of the
    pooled sample as bandwidth. energy is 2 E||a-b|| - E||a-a'|| - E||b-b'||.
    Both unbiased estimates can dip below zero and are clamped at 0.
    """
    a = np.asarray(cells_a, dtype=np.float64)
    b = np.asarray(cells_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise UsageError("samples must be 2-d with a shared gene dimension")
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise UsageError("unbiased estimators need >= 2 cells per sample")
    if kind == "energy":
        cross = cdist(a, b).mean()
        within_a = pdist(a).sum() * 2 / (m * (m - 1))
        within_b = pdist(b).sum() * 2 / (n * (n - 1))
        return max(float(2 * cross - within_a - within_b), 0.0)
    if kind != "mmd_rbf":
        raise UsageError(f"unknown distributional metric {kind!r}")
    pooled = np.vstack([a, b])
    sigma = float(np.median(pdist(pooled)))
    if sigma == 0:
        return 0.0  # every cell identical; the distributions coincide
    gamma = 1.0 / (2.0 * sigma * sigma)
    kaa = np.exp(-gamma * squareform(pdist(a, "sqeuclidean")))
    kbb = np.exp(-gamma * squareform(pdist(b, "sqeuclidean")))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    term_a = (kaa.sum() - m) / (m * (m - 1))  # squareform diagonal is 0 -> exp 1
    term_b = (kbb.sum() - n) / (n * (n - 1))
    return max(float(term_a + term_b - 2 * kab.mean()), 0.0)


# ---------------------------------------------------------------------------
# model selection


def composite_objective(rmse_mean: float, rank_average: float) -> float:
    """Scalar objective used for early stopping and trial comparison.

    RMSE measures calibration and the rank average penalizes collapse; the
    0.1 weight keeps the RMSE term dominant while still breaking ties between
    models with equal error but different specificity.
    """
    if not (np.isfinite(rmse_mean) and np.isfinite(rank_average)):
        raise UsageError("objective inputs must be finite")
    if rmse_mean < 0 or not 0 <= rank_average <= 1:
        raise UsageError("rmse must be >= 0 and rank average in [0,1]")
    return float(rmse_mean + 0.1 * rank_average)
