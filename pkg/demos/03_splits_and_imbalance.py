"""Holdout schemes and their invariants, plus imbalance measurement.

Each split kind answers a different generalization question: combo holds out
combinations whose singles stay visible, inverse_combo holds out a single
seen only inside a combination, and covariate transfer holds out a
perturbation in cell contexts where it was never observed. The imbalance
utilities quantify how unevenly perturbations are spread across covariate
levels and can downsample to a target balance.
"""

import numpy as np

from perturbkit import (SplitSpec, SynthSpec, compute_imbalance,
                        downsample_to_imbalance, generate, log_normalize,
                        make_split)

counts, _ = generate(SynthSpec(
    n_genes=100, n_perturbations=10, covariates=(("cell_type", 3),),
    cells_per_condition=30, n_combos=12, seed=3))
d = log_normalize(counts)


def describe(split, d, label):
    rows = {part: split.rows(d, part) for part in ("train", "val", "test")}
    conds = {part: {d.condition_of(i) for i in idx} for part, idx in rows.items()}
    print(f"{label}:")
    print("  cells " + " / ".join(f"{part} {len(idx)}" for part, idx in rows.items()))
    overlap = (conds["train"] & conds["val"]) | (conds["train"] & conds["test"]) \
        | (conds["val"] & conds["test"])
    print(f"  condition overlap between parts: {len(overlap)} (atomic conditions)")
    return conds


conds = describe(make_split(d, SplitSpec(kind="combo", f=0.4, seed=3)),
                 d, "combo holdout")
train_perts = {p for c in conds["train"] for p in c.perturbation}
singles_ok = all(set(c.perturbation) <= train_perts
                 for part in ("val", "test") for c in conds[part])
print(f"  every held combo's singles are trained on: {singles_ok}")

conds = describe(make_split(d, SplitSpec(kind="inverse_combo", f=0.3, seed=2)),
                 d, "inverse combo")
held = {p for part in ("val", "test") for c in conds[part]
        for p in c.perturbation}
in_train_combos = {p for c in conds["train"] if len(c.perturbation) > 1
                   for p in c.perturbation}
print(f"  held singles: {sorted(held)}; all appear inside trained combos: "
      f"{held <= in_train_combos}")

conds = describe(make_split(d, SplitSpec(kind="covariate_transfer",
                                         covariate_key="cell_type", m=1,
                                         f=0.3, seed=4)),
                 d, "covariate transfer")
held_pairs = {(c.perturbation, dict(c.covariates)["cell_type"])
              for part in ("val", "test") for c in conds[part]}
perts_held = {p for p, _ in held_pairs}
elsewhere = all(any(c.perturbation == p for c in conds["train"])
                for p in perts_held)
print(f"  {len(perts_held)} perturbations held in some levels, "
      f"each trained in the others: {elsewhere}")

# normalized-entropy imbalance: 0 = perfectly even, 1 = all in one level
for counts_per_level in ([40, 40, 40], [188, 50, 117], [188, 33, 33], [120, 0, 0]):
    print(f"counts {counts_per_level}: "
          f"imbalance {compute_imbalance(counts_per_level):.3f}")


def perts_per_level(d):
    ctrl = frozenset({d.meta.control_value})
    levels = sorted(set(d.covariates["cell_type"]))
    return [len({frozenset(d.perturbations[i]) for i in range(d.n_cells)
                 if d.covariates["cell_type"][i] == lv
                 and d.perturbations[i] != ctrl}) for lv in levels]


# downsampling trims perturbations per covariate level to hit a target balance
print(f"full dataset perturbations per level: {perts_per_level(d)}")
for target in (0.8, 0.6):
    down = downsample_to_imbalance(d, target, seed=6)
    counts = perts_per_level(down)
    print(f"balance target {target}: perturbations per level {counts} "
          f"(achieved {1 - compute_imbalance(counts):.3f}), "
          f"{down.n_cells} of {d.n_cells} cells kept")
