"""Random-search HPO and seed-stability reporting on a small combo screen.

Trials sample the architecture's search space, each trains on the train part
and is scored on validation conditions with the composite objective
RMSE + 0.1 * rank average. The winner is retrained under fresh seeds to get a
mean +- std report, which is how results should be quoted.
"""

from perturbkit import (ModelConfig, SplitSpec, SynthSpec, generate,
                        hpo_search, log_normalize, make_split,
                        stability_reruns)

counts, _ = generate(SynthSpec(
    n_genes=60, n_perturbations=8, covariates=(("cell_type", 1),),
    cells_per_condition=50, n_combos=10, effect_scale=0.6, seed=1010))
d = log_normalize(counts)
split = make_split(d, SplitSpec(kind="combo", f=0.3, seed=2010))

base = ModelConfig("linear", max_epochs=40, patience=40, seed=5)
best, trials = hpo_search(d, split, base, n_trials=12, seed=77)

print(f"{'trial':>5} {'objective':>10} {'rmse':>8} {'rank':>6}   lr / wd / batch")
for t in trials:
    if t.error:
        print(f"{t.index:>5} failed: {t.error}")
        continue
    print(f"{t.index:>5} {t.objective:>10.4f} {t.rmse:>8.4f} "
          f"{t.rank_average:>6.3f}   {t.config.lr:.2e} / "
          f"{t.config.weight_decay:.2e} / {t.config.batch_size}")

winner = min((t for t in trials if t.error is None),
             key=lambda t: (t.objective, t.index))
print(f"\nbest trial: {winner.index} "
      f"(lr {best.lr:.2e}, weight_decay {best.weight_decay:.2e})")

stats = stability_reruns(d, split, best, n_seeds=3)
print("stability over 3 retrain seeds: "
      f"objective {stats['objective_mean']:.4f} +- {stats['objective_std']:.4f}, "
      f"rmse {stats['rmse_mean_mean']:.4f} +- {stats['rmse_mean_std']:.4f}")
