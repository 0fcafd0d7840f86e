import numpy as np

from perturbkit import DatasetMeta, PerturbationDataset


def random_dataset(rng, n_cells=40, n_genes=8, n_perts=4, levels=("A", "B"),
                   key="cell_type", combo_rate=0.0, control_rate=0.3,
                   value_space="counts"):
    """Small random dataset with at least one control cell per covariate level."""
    perts = [f"p{i}" for i in range(n_perts)]
    meta = DatasetMeta(covariate_keys=(key,), value_space=value_space)
    cell_ids = [f"c{i}" for i in range(n_cells)]
    labels, cov = [], []
    for i in range(n_cells):
        # seed one control into each level up front so matching never fails
        if i < len(levels):
            labels.append({meta.control_value})
            cov.append(levels[i])
            continue
        cov.append(levels[rng.integers(len(levels))])
        if rng.random() < control_rate:
            labels.append({meta.control_value})
        elif combo_rate and rng.random() < combo_rate and n_perts >= 2:
            a, b = rng.choice(n_perts, size=2, replace=False)
            labels.append({perts[a], perts[b]})
        else:
            labels.append({perts[rng.integers(n_perts)]})
    counts = rng.poisson(3.0, size=(n_cells, n_genes)).astype(float)
    counts[:, 0] += 1  # keep every cell total positive
    return PerturbationDataset(counts, cell_ids, labels, {key: cov},
                               [f"g{j}" for j in range(n_genes)], meta)


def read_bytes_tree(path):
    """Map of relative file path -> bytes for directory comparisons."""
    import os

    out = {}
    for root, _, files in os.walk(path):
        for name in files:
            p = os.path.join(root, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, path)] = f.read()
    return out
