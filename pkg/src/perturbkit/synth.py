"""Synthetic perturbation screens with known ground truth.

Condition means are additive in log-normalized space by construction:
mean(condition) = base(covariates) + sum of per-perturbation effect vectors
(+ an interaction term for selected pairs). Counts are then drawn so that the
empirical log-normalized means of a large sample converge to those vectors,
which makes the generator usable as an oracle for evaluation code.
"""

from __future__ import annotations

import dataclasses
import itertools
import os
from collections.abc import Sequence

import numpy as np

from .dataset import Condition, DatasetMeta, PerturbationDataset
from .errors import UsageError
from .preprocess import ConditionAggregate, write_aggregates

EFFECT_CLIP = 0.7  # keeps perturbed means positive and totals near 1e4

ORACLE_KINDS = ("perfect", "noisy", "collapsed")


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    """Shape and noise parameters of one synthetic screen.

    covariates lists (key, n_levels) pairs; effect_sparsity is the number of
    genes each perturbation moves; scales are standard deviations in
    log-normalized units. cell_noise jitters each cell's gene rates and
    library_log_* set the log-normal distribution of total counts per cell.
    """

    n_genes: int = 200
    n_perturbations: int = 20
    covariates: tuple[tuple[str, int], ...] = (("cell_type", 3),)
    cells_per_condition: int = 100
    n_combos: int = 0
    effect_sparsity: int = 10
    effect_scale: float = 0.5
    covariate_scale: float = 0.5
    interaction_fraction: float = 0.0
    interaction_scale: float = 0.0
    cell_noise: float = 0.05
    library_log_mean: float = float(np.log(1e5))
    library_log_sd: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_genes < 2 or self.n_perturbations < 1 or self.cells_per_condition < 1:
            raise UsageError("n_genes, n_perturbations and cells_per_condition "
                             "must be positive (n_genes >= 2)")
        if not 0 < self.effect_sparsity <= self.n_genes:
            raise UsageError(f"effect_sparsity must be in 1..n_genes, got "
                             f"{self.effect_sparsity}")
        max_pairs = self.n_perturbations * (self.n_perturbations - 1) // 2
        if not 0 <= self.n_combos <= max_pairs:
            raise UsageError(f"n_combos must be in 0..{max_pairs}, got {self.n_combos}")
        if not 0 <= self.interaction_fraction <= 1:
            raise UsageError("interaction_fraction must be in [0,1]")
        for v in (self.effect_scale, self.covariate_scale, self.interaction_scale,
                  self.cell_noise, self.library_log_sd):
            if v < 0:
                raise UsageError("scales must be non-negative")
        for key, n in self.covariates:
            if n < 1:
                raise UsageError(f"covariate {key!r} needs >= 1 level")


@dataclasses.dataclass
class GroundTruth:
    """Exact condition means for a generated screen, additive by construction."""

    spec: SynthSpec
    gene_names: list[str]
    covariate_keys: tuple[str, ...]
    assignments: list[tuple[tuple[str, str], ...]]
    base: dict[tuple[tuple[str, str], ...], np.ndarray]
    effects: dict[str, np.ndarray]
    combos: list[tuple[str, str]]
    interactions: dict[tuple[str, str], np.ndarray]

    def perturbation_sets(self) -> list[tuple[str, ...]]:
        singles = [(p,) for p in sorted(self.effects)]
        return singles + [tuple(c) for c in self.combos]

    def conditions(self, include_control: bool = True) -> list[Condition]:
        out = []
        for assign in self.assignments:
            if include_control:
                out.append(Condition(("control",), assign))
            for pert in self.perturbation_sets():
                out.append(Condition(pert, assign))
        return sorted(out)

    def mean_for(self, condition: Condition) -> np.ndarray:
        base = self.base.get(condition.covariates)
        if base is None:
            raise UsageError(f"unknown covariate assignment {condition.covariates!r}")
        if condition.is_control():
            return base.copy()
        m = base.copy()
        for p in condition.perturbation:
            if p not in self.effects:
                raise UsageError(f"unknown perturbation {p!r}")
            m += self.effects[p]
        for pair in itertools.combinations(condition.perturbation, 2):
            term = self.interactions.get(tuple(sorted(pair)))
            if term is not None:
                m += term
        return m

    def logfc_for(self, condition: Condition) -> np.ndarray:
        if condition.is_control():
            return np.zeros(len(self.gene_names))
        return self.mean_for(condition) - self.base[condition.covariates]

    def aggregates(self, include_control: bool = True) -> list[ConditionAggregate]:
        return [ConditionAggregate(c, self.mean_for(c), n_cells=1,
                                   logfc=self.logfc_for(c))
                for c in self.conditions(include_control)]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def generate(spec: SynthSpec) -> tuple[PerturbationDataset, GroundTruth]:
    """Draw a screen. The counts stream is independent of the truth streams,
    so two specs differing only in cells_per_condition share a ground truth."""
    ss = np.random.SeedSequence(spec.seed)
    rng_base, rng_cov, rng_struct, rng_cells = (
        np.random.default_rng(s) for s in ss.spawn(4))
    G = spec.n_genes
    gene_names = [f"g{j:03d}" for j in range(G)]
    pert_names = [f"p{i:02d}" for i in range(spec.n_perturbations)]
    keys = tuple(k for k, _ in spec.covariates)
    level_names = {k: [f"{k}{i}" for i in range(n)] for k, n in spec.covariates}

    logits = rng_base.normal(0.0, 0.5, size=G)
    shifts = {k: {lev: rng_cov.normal(0.0, spec.covariate_scale, size=G)
                  for lev in level_names[k]} for k in keys}
    assignments = [tuple(zip(keys, values))
                   for values in itertools.product(*(level_names[k] for k in keys))]
    base = {}
    for assign in assignments:
        z = logits.copy()
        for k, lev in assign:
            z = z + shifts[k][lev]
        base[assign] = np.log1p(1e4 * _softmax(z))

    # perturbations move only the most expressed genes: effects stay visible
    # over sampling noise, different perturbations share target genes, and a
    # strong condition claims a real fraction of the per-cell total, which
    # the fixed library size then renormalizes away sublinearly
    min_base = np.min(np.stack(list(base.values())), axis=0)
    order = np.argsort(-min_base, kind="stable")
    n_pool = min(G, max(spec.effect_sparsity, round(1.6 * spec.effect_sparsity)))
    pool = np.sort(order[:n_pool])

    # balanced incidence: every pool gene is hit by a near-equal number of
    # perturbations and every perturbation up- and down-regulates half of its
    # targets, so no single perturbation is systematically stronger; what a
    # particular pair of perturbations does to their shared genes is then
    # pure combinatorial luck
    k = spec.effect_sparsity
    cap = -(len(pert_names) * k // -n_pool)
    remaining = {int(g): cap for g in pool}
    effects = {}
    for p in pert_names:
        avail = np.array([g for g in pool if remaining[int(g)] > 0])
        if len(avail) >= k:
            weights = np.array([remaining[int(g)] for g in avail], dtype=float)
            genes = rng_struct.choice(avail, size=k, replace=False,
                                      p=weights / weights.sum())
        else:
            genes = rng_struct.choice(pool, size=k, replace=False)
        for g in genes:
            remaining[int(g)] = max(remaining[int(g)] - 1, 0)
        vec = np.zeros(G)
        signs = np.ones(k)
        signs[:k // 2] = -1.0
        mags = np.minimum(np.abs(rng_struct.normal(0.0, spec.effect_scale,
                                                   size=k)), EFFECT_CLIP)
        vec[genes] = signs[rng_struct.permutation(k)] * mags
        effects[p] = vec

    all_pairs = list(itertools.combinations(pert_names, 2))
    combos: list[tuple[str, str]] = []
    interactions: dict[tuple[str, str], np.ndarray] = {}
    if spec.n_combos:
        picked = rng_struct.choice(len(all_pairs), size=spec.n_combos, replace=False)
        combos = [all_pairs[i] for i in sorted(picked)]
        n_int = int(np.floor(spec.interaction_fraction * spec.n_combos + 0.5))
        if n_int:
            # combos whose summed effects overload the per-gene cap switch on
            # a shared stress response: one fixed non-negative signature over
            # well-expressed non-target genes, scaled by a hinge of the total
            # overshoot. Singles never trigger it (their effects are clipped
            # at the cap), the hinge threshold keeps the realized count at or
            # below the requested fraction, and the non-negative signature
            # keeps every condition mean a valid log expression profile.
            excess = np.array([
                np.maximum(np.abs(effects[a] + effects[b]) - EFFECT_CLIP,
                           0.0).sum() for a, b in combos])
            by_excess = np.argsort(-excess, kind="stable")
            theta = float(excess[by_excess[n_int]]) if n_int < len(combos) else 0.0
            load = np.maximum(excess - theta, 0.0)
            chosen = [i for i in range(len(combos)) if load[i] > 0]
            if chosen:
                outside = [g for g in order[n_pool:]]
                support = (outside + [g for g in order[:n_pool][::-1]])
                support = np.sort(np.array(support[:spec.effect_sparsity]))
                w = np.zeros(G)
                w[support] = np.abs(rng_struct.normal(0.0, 1.0,
                                                      size=len(support)))
                w /= np.linalg.norm(w)
                beta = (spec.interaction_scale * np.sqrt(spec.effect_sparsity)
                        / float(np.mean(load[chosen])))
                for i in sorted(chosen):
                    interactions[combos[i]] = beta * load[i] * w

    truth = GroundTruth(spec=spec, gene_names=gene_names, covariate_keys=keys,
                        assignments=assignments, base=base, effects=effects,
                        combos=combos, interactions=interactions)

    pert_sets = [("control",)] + truth.perturbation_sets()
    blocks, perts, covs = [], [], {k: [] for k in keys}
    for assign in assignments:
        for pert in pert_sets:
            m = truth.mean_for(Condition(pert, assign))
            n = spec.cells_per_condition
            eps = rng_cells.normal(0.0, spec.cell_noise, size=(n, G))
            rates = np.expm1(m)[None, :] * np.exp(eps)
            shares = rates / rates.sum(axis=1, keepdims=True)
            libs = np.exp(rng_cells.normal(spec.library_log_mean,
                                           spec.library_log_sd, size=n))
            blocks.append(rng_cells.poisson(libs[:, None] * shares).astype(np.float64))
            for _ in range(n):
                perts.append(set(pert))
                for k, lev in assign:
                    covs[k].append(lev)
    counts = np.concatenate(blocks, axis=0)
    cell_ids = [f"c{i:06d}" for i in range(counts.shape[0])]
    meta = DatasetMeta(covariate_keys=keys)
    return PerturbationDataset(counts, cell_ids, perts, covs, gene_names, meta), truth


def oracle_predict(kind: str, truth: GroundTruth,
                   conditions: Sequence[Condition] | None = None,
                   jitter: float = 0.0, seed: int = 0,
                   control_means: dict | None = None) -> list[ConditionAggregate]:
    """Reference predictors against a ground truth.

    perfect returns the exact means, noisy adds N(0, jitter^2) per gene, and
    collapsed returns the (optionally supplied empirical) control mean plus
    jitter, i.e. a predictor that ignores the perturbation entirely.
    """
    if kind not in ORACLE_KINDS:
        raise UsageError(f"unknown oracle kind {kind!r}")
    if jitter < 0:
        raise UsageError("jitter must be non-negative")
    if conditions is None:
        conditions = truth.conditions(include_control=False)
    rng = np.random.default_rng(seed)
    out = []
    for cond in conditions:
        ctrl = (control_means or {}).get(cond.covariates)
        if ctrl is None:
            ctrl = truth.base.get(cond.covariates)
        if ctrl is None:
            raise UsageError(f"unknown covariate assignment {cond.covariates!r}")
        if kind == "collapsed":
            mean = ctrl.copy()
        else:
            mean = truth.mean_for(cond)
        if kind != "perfect" and jitter > 0:
            mean = mean + rng.normal(0.0, jitter, size=len(mean))
        out.append(ConditionAggregate(cond, mean, n_cells=1, logfc=mean - ctrl))
    return out


def export_truth(truth: GroundTruth, out_dir: str) -> None:
    """Write truth_means.tsv and truth_logfc.tsv in the aggregates layout."""
    os.makedirs(out_dir, exist_ok=True)
    aggs = truth.aggregates()
    write_aggregates(aggs, os.path.join(out_dir, "truth_means.tsv"),
                     truth.gene_names, field="mean")
    write_aggregates(aggs, os.path.join(out_dir, "truth_logfc.tsv"),
                     truth.gene_names, field="logfc")
