import math

import numpy as np
import pytest

from perturbkit import (
    Condition,
    ControlError,
    DatasetMeta,
    PerturbationDataset,
    UsageError,
    ValidationError,
)
from perturbkit.preprocess import (
    ConditionAggregate,
    aggregate_means,
    compute_logfc,
    gene_variances,
    log_normalize,
    read_aggregates,
    select_genes,
    tables_to_aggregates,
    welch_t,
    write_aggregates,
)
from conftest import random_dataset


def test_log_normalize_reference_value():
    meta = DatasetMeta(covariate_keys=())
    d = PerturbationDataset(np.array([[1.0, 1.0, 2.0]]), ["c1"], [{"p"}], {},
                            ["g1", "g2", "g3"], meta)
    x = log_normalize(d).counts.toarray()[0]
    # count 1 of a 4-count cell: log(1 + 2500)
    assert abs(x[0] - math.log(2501)) < 1e-12
    assert abs(x[2] - math.log(5001)) < 1e-12


def test_log_normalize_preserves_sparsity_and_conserves_mass():
    rng = np.random.default_rng(0)
    d = random_dataset(rng, n_cells=40, n_genes=12)
    norm = log_normalize(d)
    assert norm.meta.value_space == "lognorm"
    a, b = d.counts.toarray(), norm.counts.toarray()
    assert np.array_equal(a == 0, b == 0)  # zero maps to zero
    back = np.expm1(b).sum(axis=1)
    assert np.all(np.abs(back - 1e4) <= 1e-6 * 1e4)


def test_log_normalize_rejects_zero_cell_and_wrong_space():
    meta = DatasetMeta(covariate_keys=())
    d = PerturbationDataset(np.array([[1.0, 1.0], [0.0, 0.0]]), ["good", "empty"],
                            [{"p"}, {"p"}], {}, ["g1", "g2"], meta)
    with pytest.raises(ValidationError, match="empty"):
        log_normalize(d)
    ok = random_dataset(np.random.default_rng(1))
    with pytest.raises(UsageError):
        log_normalize(log_normalize(ok))


def _three_condition_dataset(rng, n_genes=50, cells_per=10):
    """control/pA/pB in one covariate level; gene 0 is low-variance but DE in pA."""
    meta = DatasetMeta(covariate_keys=("ct",))
    counts = rng.integers(0, 200, size=(3 * cells_per, n_genes)).astype(float)
    counts[:, 0] = 5.0
    labels, cov = [], []
    for b, name in enumerate(["control", "pA", "pB"]):
        for i in range(cells_per):
            labels.append({name})
            cov.append("A")
        if name == "pA":
            counts[b * cells_per:(b + 1) * cells_per, 0] = 12.0
    return PerturbationDataset(counts, [f"c{i}" for i in range(3 * cells_per)],
                               labels, {"ct": cov},
                               [f"g{j}" for j in range(n_genes)], meta)


def test_select_genes_identity_when_n_hvg_is_gene_count():
    d = log_normalize(random_dataset(np.random.default_rng(2)))
    sub, names = select_genes(d, n_hvg=d.n_genes, n_de_per_condition=0)
    assert names == d.gene_names
    assert sub == d


def test_de_rescues_low_variance_gene():
    d = log_normalize(_three_condition_dataset(np.random.default_rng(3)))
    var = gene_variances(d)
    hvg_rank = int((np.argsort(-var, kind="stable") == 0).argmax())
    assert hvg_rank >= 10  # the effect gene must not already be an HVG
    sub, names = select_genes(d, n_hvg=10, n_de_per_condition=3,
                              include_perturbed_genes=False)
    assert "g0" in names
    sub2, names2 = select_genes(d, n_hvg=10, n_de_per_condition=0,
                                include_perturbed_genes=False)
    assert "g0" not in names2


def test_perturbed_gene_names_kept_for_genetic_screens():
    rng = np.random.default_rng(4)
    meta = DatasetMeta(covariate_keys=())
    counts = rng.integers(1, 50, size=(12, 6)).astype(float)
    # perturbations named after genes, as in a CRISPR screen
    labels = [{"control"}] * 4 + [{"g5"}] * 4 + [{"g3"}] * 4
    d = log_normalize(PerturbationDataset(counts, [f"c{i}" for i in range(12)],
                                          labels, {}, [f"g{j}" for j in range(6)], meta))
    _, names = select_genes(d, n_hvg=1, n_de_per_condition=0)
    assert {"g3", "g5"} <= set(names)


def test_zero_variance_genes_rank_last():
    rng = np.random.default_rng(5)
    meta = DatasetMeta(covariate_keys=())
    counts = rng.integers(0, 30, size=(20, 10)).astype(float)
    counts[:, 7] = 4.0  # flat gene: no variance after normalization? not quite,
    # totals differ per cell, so force zero variance in lognorm via proportionality
    counts[:, 7] = counts.sum(axis=1) - counts[:, 7]
    d = log_normalize(PerturbationDataset(counts + 1, [f"c{i}" for i in range(20)],
                                          [{"p"}] * 20, {},
                                          [f"g{j}" for j in range(10)], meta))
    var = gene_variances(d)
    order = np.argsort(-var, kind="stable")
    _, names = select_genes(d, n_hvg=9, n_de_per_condition=0,
                            include_perturbed_genes=False)
    dropped = set(d.gene_names) - set(names)
    assert dropped == {d.gene_names[order[-1]]}


def test_select_genes_monotone_in_n_hvg():
    d = log_normalize(_three_condition_dataset(np.random.default_rng(6)))
    _, small = select_genes(d, n_hvg=5, n_de_per_condition=2)
    _, big = select_genes(d, n_hvg=15, n_de_per_condition=2)
    assert set(small) <= set(big)
    with pytest.raises(UsageError):
        select_genes(d, n_hvg=d.n_genes + 1, n_de_per_condition=0)


def test_de_skips_tiny_conditions_with_warning(caplog):
    meta = DatasetMeta(covariate_keys=())
    counts = np.ones((4, 3))
    counts[3, 1] = 9.0
    d = log_normalize(PerturbationDataset(counts, ["c1", "c2", "c3", "c4"],
                                          [{"control"}, {"control"}, {"control"}, {"p"}],
                                          {}, ["g1", "g2", "g3"], meta))
    with caplog.at_level("WARNING", logger="perturbkit.preprocess"):
        select_genes(d, n_hvg=3, n_de_per_condition=2)
    assert any("skipped" in r.message for r in caplog.records)


def test_welch_t_guards():
    with pytest.raises(UsageError):
        welch_t(np.ones((1, 3)), np.ones((4, 3)))
    t = welch_t(np.ones((3, 2)) * 2, np.ones((3, 2)))
    assert np.all(np.isinf(t))  # zero variance, nonzero difference
    t0 = welch_t(np.ones((3, 2)), np.ones((3, 2)))
    assert np.all(t0 == 0)


def test_aggregate_means_against_bruteforce():
    rng = np.random.default_rng(7)
    d = log_normalize(random_dataset(rng, n_cells=120, n_genes=9,
                                     levels=("A", "B"), combo_rate=0.2))
    aggs = aggregate_means(d, min_cells=1)
    dense = d.counts.toarray()
    seen = set()
    for a in aggs:
        rows = [i for i in range(d.n_cells) if d.condition_of(i) == a.condition]
        assert a.n_cells == len(rows)
        assert np.all(np.abs(a.mean_lognorm - dense[rows].mean(axis=0)) < 1e-12)
        seen.add(a.condition)
    assert seen == set(d.distinct_conditions())


def test_aggregate_means_trivial_cases(caplog):
    meta = DatasetMeta(covariate_keys=())
    counts = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 1.0]])
    d = log_normalize(PerturbationDataset(counts, ["c1", "c2", "c3"],
                                          [{"p"}, {"p"}, {"q"}], {},
                                          ["g1", "g2"], meta))
    aggs = aggregate_means(d, min_cells=1)
    twin = next(a for a in aggs if a.condition.perturbation == ("p",))
    single = next(a for a in aggs if a.condition.perturbation == ("q",))
    assert np.allclose(twin.mean_lognorm, d.counts.toarray()[0])
    assert np.allclose(single.mean_lognorm, d.counts.toarray()[2])
    with caplog.at_level("WARNING", logger="perturbkit.preprocess"):
        kept = aggregate_means(d, min_cells=2)
    assert [a.condition.perturbation for a in kept] == [("p",)]
    assert any("min_cells" in r.message for r in caplog.records)


def test_aggregation_linearity():
    rng = np.random.default_rng(8)
    d = log_normalize(random_dataset(rng, n_cells=60, n_genes=7))
    cond = [c for c in d.distinct_conditions() if not c.is_control()][0]
    rows = [i for i in range(d.n_cells) if d.condition_of(i) == cond]
    half = len(rows) // 2
    a, b = d.subset_cells(rows[:half]), d.subset_cells(rows[half:])
    both = d.subset_cells(rows)
    ma = aggregate_means(a, min_cells=1)[0]
    mb = aggregate_means(b, min_cells=1)[0]
    mboth = aggregate_means(both, min_cells=1)[0]
    weighted = (ma.n_cells * ma.mean_lognorm + mb.n_cells * mb.mean_lognorm) \
        / (ma.n_cells + mb.n_cells)
    assert np.all(np.abs(weighted - mboth.mean_lognorm) < 1e-12)


def test_compute_logfc():
    rng = np.random.default_rng(9)
    d = log_normalize(random_dataset(rng, n_cells=80, levels=("A", "B")))
    aggs = compute_logfc(aggregate_means(d, min_cells=1))
    by_cond = {a.condition: a for a in aggs}
    for a in aggs:
        if a.condition.is_control():
            assert np.all(a.logfc == 0)
        else:
            ctrl = by_cond[Condition(("control",), a.condition.covariates)]
            assert np.allclose(a.logfc, a.mean_lognorm - ctrl.mean_lognorm)
    # antisymmetry: swapping the roles of the two populations negates the vector
    pert = next(a for a in aggs if not a.condition.is_control())
    ctrl = by_cond[Condition(("control",), pert.condition.covariates)]
    swapped = ctrl.mean_lognorm - pert.mean_lognorm
    assert np.allclose(swapped, -pert.logfc)


def test_compute_logfc_missing_control():
    meta = DatasetMeta(covariate_keys=("ct",))
    agg = ConditionAggregate(Condition(("p",), (("ct", "B"),)), np.ones(3), 5)
    with pytest.raises(ControlError, match="ct=B"):
        compute_logfc([agg])


def test_aggregates_tsv_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    d = log_normalize(random_dataset(rng, n_cells=70, levels=("A", "B"), combo_rate=0.2))
    aggs = compute_logfc(aggregate_means(d, min_cells=1))
    mean_path, fc_path = tmp_path / "aggregates.tsv", tmp_path / "logfc.tsv"
    write_aggregates(aggs, mean_path, d.gene_names, field="mean")
    write_aggregates(aggs, fc_path, d.gene_names, field="logfc")
    means = read_aggregates(mean_path)
    logfc = read_aggregates(fc_path)
    assert means.gene_names == d.gene_names
    assert means.covariate_keys == ("cell_type",)
    back = tables_to_aggregates(means, logfc)
    assert [a.condition for a in back] == [a.condition for a in aggs]
    for x, y in zip(back, aggs):
        assert np.array_equal(x.mean_lognorm, y.mean_lognorm)
        assert np.array_equal(x.logfc, y.logfc)
        assert x.n_cells == y.n_cells
    # byte stability of a rewrite
    write_aggregates(back, tmp_path / "again.tsv", means.gene_names, field="mean")
    assert (tmp_path / "again.tsv").read_bytes() == mean_path.read_bytes()


def test_read_aggregates_rejects_malformed(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("perturbation\tn_cells\tg1\np\t3\tnot_a_number\n")
    with pytest.raises(Exception, match="numeric"):
        read_aggregates(p)
    p.write_text("wrong\tn_cells\tg1\n")
    with pytest.raises(Exception, match="perturbation"):
        read_aggregates(p)
