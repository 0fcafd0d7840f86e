"""Random-search hyperparameter optimization with stability reruns.

A search draws trial configurations from per-architecture spaces, trains each
one on the train split and scores it on the val split with the composite
objective (macro RMSE + 0.1 x rank average). The winning configuration is then
retrained under several seeds and reported as mean +- sample standard
deviation, since single-run scores of stochastic trainers are not comparable.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Mapping

import numpy as np

from .dataset import CounterfactualRequest, PerturbationDataset
from .errors import PerturbkitError, TrainError, UsageError
from .metrics import composite_objective, rank_metric
from .models import ModelConfig, TrainedModel, predict, train_model
from .preprocess import ConditionAggregate
from .splits import SplitAssignment

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# search distributions


@dataclasses.dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng) -> float:
        if not 0 < self.low <= self.high:
            raise UsageError(f"bad log-uniform range [{self.low}, {self.high}]")
        return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))


@dataclasses.dataclass(frozen=True)
class UniformFloat:
    low: float
    high: float
    step: float | None = None

    def sample(self, rng) -> float:
        if self.low > self.high:
            raise UsageError(f"bad range [{self.low}, {self.high}]")
        if self.step is None:
            return float(rng.uniform(self.low, self.high))
        n = int(round((self.high - self.low) / self.step))
        return float(self.low + self.step * rng.integers(0, n + 1))


@dataclasses.dataclass(frozen=True)
class UniformInt:
    low: int
    high: int
    step: int = 1

    def sample(self, rng) -> int:
        if self.low > self.high or self.step < 1:
            raise UsageError(f"bad range [{self.low}, {self.high}] step {self.step}")
        n = (self.high - self.low) // self.step
        return int(self.low + self.step * rng.integers(0, n + 1))


@dataclasses.dataclass(frozen=True)
class Choice:
    options: tuple

    def sample(self, rng):
        if not self.options:
            raise UsageError("empty choice")
        return self.options[rng.integers(0, len(self.options))]


DEFAULT_SPACES: dict[str, dict] = {
    "linear": {
        "lr": LogUniform(5e-6, 5e-3),
        "weight_decay": LogUniform(1e-8, 1e-3),
    },
    "latent_additive": {
        "n_layers": UniformInt(1, 7, step=2),
        "hidden_width": UniformInt(256, 5376, step=1024),
        "latent_dim": Choice((64, 128, 192, 256, 512)),
        "lr": LogUniform(5e-6, 5e-3),
        "weight_decay": LogUniform(1e-8, 1e-3),
        "dropout": UniformFloat(0.0, 0.8, step=0.1),
    },
    "decoder_only": {
        "n_layers": UniformInt(1, 7, step=2),
        "hidden_width": UniformInt(256, 5376, step=1024),
        "lr": LogUniform(5e-6, 5e-3),
        "weight_decay": LogUniform(1e-8, 1e-3),
        "softplus_output": Choice((True, False)),
    },
}


# ---------------------------------------------------------------------------
# validation scoring


def _grouped_rows(d, rows, skip_control=True):
    groups = {}
    for i in rows:
        i = int(i)
        if skip_control and d.is_control(i):
            continue
        groups.setdefault(d.condition_of(i), []).append(i)
    return groups


def _control_pools(d, rows):
    pools: dict[tuple, list[int]] = {}
    for i in rows:
        i = int(i)
        if d.is_control(i):
            pools.setdefault(d.covariate_assignment(i), []).append(i)
    return pools


def validation_report(model: TrainedModel, d: PerturbationDataset,
                      split: SplitAssignment, label: str = "val",
                      n_controls: int = 100, seed: int = 0,
                      controls: str = "train") -> dict:
    """Score a model on one split partition via the public predict path.

    controls picks the pool predictions are conditioned on: "train" uses only
    train-split controls (the honest setting for held-out evaluation), "all"
    uses every control cell.
    """
    if controls not in ("train", "all"):
        raise UsageError(f"controls must be 'train' or 'all', got {controls!r}")
    groups = _grouped_rows(d, split.rows(d, label))
    if not groups:
        raise UsageError(f"split has no perturbed {label} cells")
    pool_rows = split.rows(d, "train") if controls == "train" else range(d.n_cells)
    pools = _control_pools(d, pool_rows)
    requests, obs = [], []
    for cond in sorted(groups):
        pool = pools.get(tuple(cond.covariates))
        if not pool:
            raise UsageError(f"no {controls} controls for condition "
                             f"{cond.label(d.meta.combination_delimiter)}")
        requests.append(CounterfactualRequest(cond, tuple(pool)))
        rows = np.asarray(groups[cond], dtype=int)
        target = np.asarray(d.counts[rows].mean(axis=0)).ravel()
        obs.append(ConditionAggregate(cond, target, n_cells=len(rows)))
    preds = predict(model, d, requests, n_controls=n_controls, seed=seed)
    rmses = [float(np.sqrt(np.mean((p.mean_lognorm - o.mean_lognorm) ** 2)))
             for p, o in zip(preds, obs)]
    rank_avg = 0.0
    if len(preds) >= 2:
        _, rank_avg = rank_metric(preds, obs, dist_kind="rmse_mean")
    rmse_mean = float(np.mean(rmses))
    return {"rmse_mean": rmse_mean, "rank_average": float(rank_avg),
            "objective": composite_objective(rmse_mean, rank_avg),
            "n_conditions": len(preds)}


# ---------------------------------------------------------------------------
# search


@dataclasses.dataclass
class Trial:
    index: int
    config: ModelConfig
    objective: float | None
    rmse: float | None = None
    rank_average: float | None = None
    error: str | None = None


def sample_config(base: ModelConfig, space: Mapping, rng) -> ModelConfig:
    overrides = {name: dist.sample(rng) for name, dist in sorted(space.items())}
    return dataclasses.replace(base, **overrides)


def hpo_search(d: PerturbationDataset, split: SplitAssignment,
               base_config: ModelConfig, space: Mapping | None = None,
               n_trials: int = 60, seed: int = 0, n_controls: int = 100,
               train_fn=None, eval_fn=None) -> tuple[ModelConfig, list[Trial]]:
    """Random search; returns (best configuration, all trials).

    Failed trials are recorded with their error and skipped in the comparison.
    Ties on the objective go to the earliest trial.
    """
    if n_trials < 1:
        raise UsageError("n_trials must be >= 1")
    if space is None:
        space = DEFAULT_SPACES[base_config.architecture]
    train = train_fn or train_model
    rng = np.random.default_rng(seed)
    trials: list[Trial] = []
    for t in range(n_trials):
        cfg = sample_config(base_config, space, rng)
        try:
            model = train(d, split, cfg)
            if eval_fn is not None:
                report = eval_fn(model, d, split)
            else:
                report = validation_report(model, d, split,
                                           n_controls=n_controls, seed=cfg.seed)
            trials.append(Trial(t, cfg, report["objective"], report["rmse_mean"],
                                report["rank_average"]))
            log.info("trial %d/%d objective %.5f", t + 1, n_trials,
                     report["objective"])
        except PerturbkitError as e:
            trials.append(Trial(t, cfg, None, error=f"{e.code}: {e}"))
            log.warning("trial %d/%d failed: %s", t + 1, n_trials, e)
    scored = [tr for tr in trials if tr.objective is not None]
    if not scored:
        raise TrainError(f"all {n_trials} trials failed; last error: "
                         f"{trials[-1].error}")
    best = min(scored, key=lambda tr: (tr.objective, tr.index))
    return best.config, trials


def stability_reruns(d: PerturbationDataset, split: SplitAssignment,
                     cfg: ModelConfig, n_seeds: int = 5,
                     seeds: list[int] | None = None, n_controls: int = 100,
                     train_fn=None, eval_fn=None) -> dict:
    """Retrain one configuration under several seeds; mean +- sample std."""
    if seeds is None:
        seeds = [cfg.seed + k for k in range(n_seeds)]
    if not seeds:
        raise UsageError("need at least one seed")
    train = train_fn or train_model
    per_seed = []
    for s in seeds:
        cfg_s = dataclasses.replace(cfg, seed=int(s))
        model = train(d, split, cfg_s)
        if eval_fn is not None:
            report = eval_fn(model, d, split)
        else:
            report = validation_report(model, d, split, n_controls=n_controls,
                                       seed=int(s))
        report = dict(report, seed=int(s))
        per_seed.append(report)
    out = {"seeds": [int(s) for s in seeds], "per_seed": per_seed}
    for key in ("objective", "rmse_mean", "rank_average"):
        vals = np.array([r[key] for r in per_seed], dtype=float)
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out
