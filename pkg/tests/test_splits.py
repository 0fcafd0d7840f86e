import math

import numpy as np
import pytest
from conftest import random_dataset

from perturbkit import DatasetMeta, PerturbationDataset
from perturbkit.errors import FormatError, SplitError, UsageError
from perturbkit.splits import (SplitAssignment, SplitSpec,
                               apply_train_level_restriction, compute_imbalance,
                               downsample_to_imbalance, load_split, make_split,
                               save_split, split_combo, split_covariate_transfer)


def grid_dataset(pool, cells_per=2, controls_per=2, n_genes=3, key="ct"):
    """One dataset cell block per (level, perturbation tuple) in pool."""
    perts, cov = [], []
    for lev in sorted(pool):
        for _ in range(controls_per):
            perts.append({"control"})
            cov.append(lev)
        for p in pool[lev]:
            for _ in range(cells_per):
                perts.append(set(p))
                cov.append(lev)
    n = len(perts)
    counts = np.ones((n, n_genes))
    meta = DatasetMeta(covariate_keys=(key,))
    return PerturbationDataset(counts, [f"c{i:05d}" for i in range(n)], perts,
                               {key: cov}, [f"g{j}" for j in range(n_genes)], meta)


def flat_dataset(pert_tuples, n_controls=1, n_genes=2):
    """No covariates; one cell per perturbation tuple plus controls."""
    perts = [{"control"}] * n_controls + [set(p) for p in pert_tuples]
    n = len(perts)
    counts = np.ones((n, n_genes))
    meta = DatasetMeta()
    return PerturbationDataset(counts, [f"c{i:05d}" for i in range(n)], perts,
                               {}, [f"g{j}" for j in range(n_genes)], meta)


def held_conditions(d, assignment, key=None):
    """(level_or_None, pert tuple) pairs appearing in val or test."""
    out = {"val": set(), "test": set()}
    for i, cid in enumerate(d.cell_ids):
        lab = assignment.labels[cid]
        if lab == "train":
            continue
        lev = d.covariates[key][i] if key else None
        out[lab].add((lev, tuple(sorted(d.perturbations[i]))))
    return out


def assert_conditions_atomic(d, assignment, key=None):
    seen = {}
    for i, cid in enumerate(d.cell_ids):
        lev = d.covariates[key][i] if key else None
        cond = (lev, tuple(sorted(d.perturbations[i])))
        lab = assignment.labels[cid]
        assert seen.setdefault(cond, lab) == lab, f"condition {cond} straddles splits"


# ---------------------------------------------------------------------------
# covariate transfer


def test_covariate_transfer_counts_and_coverage():
    pool = {lev: [(f"p{i}",) for i in range(10)] for lev in ("A", "B", "C")}
    d = grid_dataset(pool)
    spec = SplitSpec(kind="covariate_transfer", f=0.3, m=1, seed=5)
    a = split_covariate_transfer(d, spec)
    assert set(a.labels) == set(d.cell_ids)
    for i in range(d.n_cells):
        if d.is_control(i):
            assert a.labels[d.cell_ids[i]] == "train"
    assert_conditions_atomic(d, a, key="ct")
    held = held_conditions(d, a, key="ct")
    pairs = held["val"] | held["test"]
    # m=1: one held level, round-half-up(0.3 * 10) = 3 of its perturbations
    assert len({lev for lev, _ in pairs}) == 1
    assert len(pairs) == 3
    assert len(held["val"]) == 2 and len(held["test"]) == 1
    for lev, p in pairs:
        other_levels = {d.covariates["ct"][i] for i in range(d.n_cells)
                        if tuple(sorted(d.perturbations[i])) == p
                        and a.labels[d.cell_ids[i]] == "train"}
        assert other_levels, f"{p} held at {lev} but trained nowhere"
        assert lev not in other_levels


def test_covariate_transfer_multi_level():
    pool = {lev: [(f"p{i}",) for i in range(8)] for lev in ("A", "B", "C", "D")}
    d = grid_dataset(pool, cells_per=1, controls_per=1)
    seen_h = set()
    for seed in range(30):
        spec = SplitSpec(kind="covariate_transfer", f=0.25, m=3, seed=seed)
        a = split_covariate_transfer(d, spec)
        held = held_conditions(d, a, key="ct")
        levs = {lev for lev, _ in held["val"] | held["test"]}
        assert 1 <= len(levs) <= 3
        seen_h.add(len(levs))
    assert seen_h == {1, 2, 3}, "h should range over 1..m across seeds"


def test_covariate_transfer_respects_minimum():
    # f=0.5 of 2 perturbations would leave 1 < min 2 in the held level
    pool = {lev: [("p0",), ("p1",)] for lev in ("A", "B")}
    d = grid_dataset(pool)
    spec = SplitSpec(kind="covariate_transfer", f=0.5, seed=0,
                     min_perturbations_per_level=2, max_retries=20)
    with pytest.raises(SplitError, match="no feasible"):
        split_covariate_transfer(d, spec)


def test_covariate_transfer_needs_shared_perturbation():
    # disjoint perturbation sets per level: held perts can never train elsewhere
    pool = {"A": [("pA0",), ("pA1",)], "B": [("pB0",), ("pB1",)]}
    d = grid_dataset(pool)
    spec = SplitSpec(kind="covariate_transfer", f=0.5, seed=0, max_retries=15)
    with pytest.raises(SplitError):
        split_covariate_transfer(d, spec)


def test_covariate_transfer_single_level_rejected():
    pool = {"A": [("p0",), ("p1",)]}
    d = grid_dataset(pool)
    with pytest.raises(UsageError, match="levels"):
        split_covariate_transfer(d, SplitSpec(kind="covariate_transfer"))


def test_split_determinism():
    pool = {lev: [(f"p{i}",) for i in range(12)] for lev in ("A", "B", "C")}
    d = grid_dataset(pool)
    spec = SplitSpec(kind="covariate_transfer", f=0.4, m=2, seed=11)
    assert split_covariate_transfer(d, spec) == split_covariate_transfer(d, spec)
    other = SplitSpec(kind="covariate_transfer", f=0.4, m=2, seed=12)
    assert split_covariate_transfer(d, other) != split_covariate_transfer(d, spec)


# ---------------------------------------------------------------------------
# combination splits


def test_combo_holdout_count_matches_manual_rounding():
    # 155 singles, 131 duals, f=0.7: floor(0.7*131 + 0.5) = 92 held out
    singles = [(f"s{i:03d}",) for i in range(155)]
    duals = []
    k = 0
    for i in range(155):
        for j in range(i + 1, 155):
            duals.append((f"s{i:03d}", f"s{j:03d}"))
            k += 1
            if k == 131:
                break
        if k == 131:
            break
    d = flat_dataset(singles + duals)
    a = split_combo(d, SplitSpec(kind="combo", f=0.7, seed=3))
    held = held_conditions(d, a)
    pairs = held["val"] | held["test"]
    assert len(pairs) == 92
    assert all(len(p) == 2 for _, p in pairs)
    assert len(held["val"]) == 46 and len(held["test"]) == 46
    for i in range(d.n_cells):
        if len(d.perturbations[i]) == 1:
            assert a.labels[d.cell_ids[i]] == "train"


def test_combo_requires_combinations():
    d = flat_dataset([("p0",), ("p1",)])
    with pytest.raises(SplitError, match="no perturbation combinations"):
        split_combo(d, SplitSpec(kind="combo", f=0.5))


def test_combo_skips_unseen_constituents(caplog):
    # q1 never appears as a singleton, so (p0, q1) must stay in train
    d = flat_dataset([("p0",), ("p1",), ("p0", "p1"), ("p0", "q1")])
    with caplog.at_level("WARNING", logger="perturbkit.splits"):
        a = split_combo(d, SplitSpec(kind="combo", f=0.9, seed=0))
    assert "never seen as singletons" in caplog.text
    held = held_conditions(d, a)
    assert held["val"] | held["test"] == {(None, ("p0", "p1"))}


def test_inverse_combo_invariants():
    singles = [(s,) for s in "abcdef"]
    duals = [("a", "b"), ("b", "c"), ("c", "d"), ("d", "e"), ("e", "f")]
    d = flat_dataset(singles + duals)
    for seed in range(25):
        a = split_combo(d, SplitSpec(kind="inverse_combo", f=0.5, seed=seed))
        held = {p for _, p in (lambda h: h["val"] | h["test"])(held_conditions(d, a))}
        assert held, "at least one singleton held out"
        assert all(len(p) == 1 for p in held)
        held_names = {p[0] for p in held}
        for i in range(d.n_cells):
            if len(d.perturbations[i]) == 2:
                assert a.labels[d.cell_ids[i]] == "train"
        for s in held_names:
            partners = [dual for dual in duals if s in dual]
            assert partners, f"held singleton {s} is in no dual"
            # some partner dual has its other member in train
            assert any(other not in held_names
                       for dual in partners for other in dual if other != s)


def test_inverse_combo_requires_duals():
    d = flat_dataset([("p0",), ("p1",), ("p0", "q1")])
    with pytest.raises(SplitError, match="inverse_combo"):
        split_combo(d, SplitSpec(kind="inverse_combo", f=0.5))


def test_spec_validation():
    with pytest.raises(UsageError):
        SplitSpec(kind="bogus")
    with pytest.raises(UsageError):
        SplitSpec(kind="combo", f=0.0)
    with pytest.raises(UsageError):
        SplitSpec(kind="combo", f=1.0)
    with pytest.raises(UsageError):
        SplitSpec(kind="combo", val_test_ratio=1.5)
    with pytest.raises(UsageError):
        SplitSpec(kind="covariate_transfer", m=0)


# ---------------------------------------------------------------------------
# imbalance


def entropy_imbalance(counts):
    total = sum(counts)
    h = -sum((c / total) * math.log(c / total) for c in counts if c > 0)
    return 1.0 - h / math.log(len(counts))


def test_imbalance_reference_values():
    assert compute_imbalance([188, 188, 188]) == 0.0
    for counts, balance in [((188, 50, 117), 0.9), ((188, 81, 30), 0.8),
                            ((188, 33, 33), 0.7)]:
        got = 1.0 - compute_imbalance(counts)
        assert got == pytest.approx(1.0 - entropy_imbalance(counts), abs=1e-12)
        assert abs(got - balance) <= 0.02


def test_imbalance_edge_cases():
    assert compute_imbalance([7, 0, 0]) == 1.0
    assert compute_imbalance([5, 5]) == 0.0
    assert compute_imbalance([5, 5, 0]) == pytest.approx(
        entropy_imbalance([5, 5, 0]), abs=1e-12)
    with pytest.raises(UsageError):
        compute_imbalance([5])
    with pytest.raises(UsageError):
        compute_imbalance([3, -1])
    with pytest.raises(UsageError):
        compute_imbalance([0, 0])


def test_downsample_hits_target():
    pool = {"A": [(f"p{i}",) for i in range(24)],
            "B": [(f"p{i}",) for i in range(20)],
            "C": [(f"p{i}",) for i in range(18)]}
    d = grid_dataset(pool, cells_per=1, controls_per=2)
    for target in (0.9, 0.7):
        for seed in range(5):
            sub = downsample_to_imbalance(d, target, seed=seed)
            counts = {}
            for i in range(sub.n_cells):
                if sub.is_control(i):
                    continue
                lev = sub.covariates["ct"][i]
                counts.setdefault(lev, set()).add(tuple(sorted(sub.perturbations[i])))
            sizes = [len(counts[lev]) for lev in sorted(counts)]
            assert abs((1.0 - compute_imbalance(sizes)) - target) <= 0.02
            assert max(sizes) == 24, "largest level keeps all perturbations"
            assert len(sub.control_rows()) == len(d.control_rows())


def test_downsample_identity_and_errors():
    pool = {"A": [("p0",), ("p1",)], "B": [("p0",), ("p1",)]}
    d = grid_dataset(pool)
    assert downsample_to_imbalance(d, 1.0, seed=0) is d
    with pytest.raises(UsageError):
        downsample_to_imbalance(d, 0.0, seed=0)
    with pytest.raises(SplitError):
        # 2 perturbations per level cannot express a strong imbalance
        downsample_to_imbalance(d, 0.3, seed=0, max_retries=50)


# ---------------------------------------------------------------------------
# train-level restriction


def test_train_level_restriction():
    pool = {lev: [(f"p{i}",) for i in range(6)] for lev in ("A", "B", "C")}
    d = grid_dataset(pool)
    a = split_covariate_transfer(d, SplitSpec(kind="covariate_transfer", f=0.4, seed=2))
    sub, sub_a = apply_train_level_restriction(d, a, ["A", "B"])
    for i, cid in enumerate(sub.cell_ids):
        lab = sub_a.labels[cid]
        assert lab == a.labels[cid]
        if lab == "train":
            assert sub.covariates["ct"][i] in ("A", "B")
    kept_eval = {cid for cid, lab in sub_a.labels.items() if lab != "train"}
    all_eval = {cid for cid, lab in a.labels.items() if lab != "train"}
    assert kept_eval == all_eval, "val/test cells unchanged"


# ---------------------------------------------------------------------------
# CSV round trip


def test_split_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = random_dataset(rng, n_cells=30)
    a = split_covariate_transfer(d, SplitSpec(kind="covariate_transfer", f=0.4, seed=1))
    p = tmp_path / "split.csv"
    save_split(a, str(p), order=d.cell_ids)
    loaded = load_split(str(p), d)
    assert loaded == a
    save_split(loaded, str(tmp_path / "again.csv"), order=d.cell_ids)
    assert p.read_bytes() == (tmp_path / "again.csv").read_bytes()


def test_split_csv_errors(tmp_path):
    rng = np.random.default_rng(1)
    d = random_dataset(rng, n_cells=6)
    p = tmp_path / "bad.csv"

    p.write_text("cell,split\nc0,train\n")
    with pytest.raises(FormatError, match="header"):
        load_split(str(p))

    p.write_text("cell_id,split\nc0,validation\n")
    with pytest.raises(FormatError, match="validation"):
        load_split(str(p))

    p.write_text("cell_id,split\nc0,train\nc0,val\n")
    with pytest.raises(FormatError, match="duplicate"):
        load_split(str(p))

    rows = "".join(f"{cid},train\n" for cid in d.cell_ids[:-1])
    p.write_text("cell_id,split\n" + rows)
    with pytest.raises(UsageError, match="misses"):
        load_split(str(p), d)

    rows = "".join(f"{cid},train\n" for cid in d.cell_ids)
    p.write_text("cell_id,split\n" + rows + "ghost,train\n")
    with pytest.raises(UsageError, match="unknown cell"):
        load_split(str(p), d)


def test_assignment_rows_and_counts():
    labels = {"a": "train", "b": "val", "c": "test", "d": "train"}
    a = SplitAssignment(labels)
    assert a.counts() == {"train": 2, "val": 1, "test": 1}
    with pytest.raises(UsageError):
        SplitAssignment({"a": "Train"})


# ---------------------------------------------------------------------------
# randomized invariants (the acceptance suite runs a larger version)


def test_fuzzed_split_invariants():
    rng = np.random.default_rng(99)
    for trial in range(20):
        n_levels = int(rng.integers(2, 4))
        levels = [chr(ord("A") + i) for i in range(n_levels)]
        n_perts = int(rng.integers(5, 12))
        pool = {lev: [(f"p{i}",) for i in range(n_perts)] for lev in levels}
        d = grid_dataset(pool, cells_per=int(rng.integers(1, 3)))
        spec = SplitSpec(kind="covariate_transfer",
                         f=float(rng.uniform(0.15, 0.6)),
                         m=int(rng.integers(1, n_levels + 1)),
                         val_test_ratio=float(rng.uniform(0.3, 0.7)),
                         seed=int(rng.integers(1 << 30)))
        a = make_split(d, spec)
        assert set(a.labels) == set(d.cell_ids)
        assert_conditions_atomic(d, a, key="ct")
        counts = a.counts()
        assert counts["val"] + counts["test"] > 0
        for i in range(d.n_cells):
            if d.is_control(i):
                assert a.labels[d.cell_ids[i]] == "train"
        held = held_conditions(d, a, key="ct")
        for lev, p in held["val"] | held["test"]:
            trained = {d.covariates["ct"][i] for i in range(d.n_cells)
                       if tuple(sorted(d.perturbations[i])) == p
                       and a.labels[d.cell_ids[i]] == "train"}
            assert trained and lev not in trained
