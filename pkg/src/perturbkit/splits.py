"""Train/val/test split generation and imbalance manipulation.

Splits operate on conditions, not cells: a held-out (perturbation, level) pair
moves all of its cells together, so no condition straddles the train/eval
boundary. Control cells always land in train unless a custom split file says
otherwise.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from collections.abc import Sequence

import numpy as np

from .dataset import PerturbationDataset
from .errors import FormatError, SplitError, UsageError

log = logging.getLogger(__name__)

SPLIT_KINDS = ("covariate_transfer", "combo", "inverse_combo")
LABELS = ("train", "val", "test")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """Parameters for one split draw.

    m is the maximum number of held-out covariate levels, f the fraction of
    perturbations held out per held-out level (or of combinations in combo
    mode), val_test_ratio the share of the held-out conditions sent to val.
    covariate_key defaults to the dataset's first covariate key. train_levels,
    when set, restricts train cells to the listed levels afterwards (nested
    data-scaling subsets).
    """

    kind: str
    covariate_key: str | None = None
    m: int = 1
    f: float = 0.3
    val_test_ratio: float = 0.5
    seed: int = 0
    min_perturbations_per_level: int = 1
    max_retries: int = 100
    train_levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise UsageError(f"unknown split kind {self.kind!r}")
        if not 0 < self.f < 1:
            raise UsageError(f"f must be in (0,1), got {self.f}")
        if self.m < 1:
            raise UsageError(f"m must be >= 1, got {self.m}")
        if not 0 < self.val_test_ratio < 1:
            raise UsageError(f"val_test_ratio must be in (0,1), got {self.val_test_ratio}")
        if self.max_retries < 1:
            raise UsageError("max_retries must be >= 1")


class SplitAssignment:
    """Map cell_id -> label in {train, val, test}."""

    def __init__(self, labels: dict[str, str]):
        for cid, lab in labels.items():
            if lab not in LABELS:
                raise UsageError(f"unknown split label {lab!r} for cell {cid!r}")
        self.labels = dict(labels)

    def __eq__(self, other):
        return isinstance(other, SplitAssignment) and self.labels == other.labels

    def __len__(self):
        return len(self.labels)

    def counts(self) -> dict[str, int]:
        out = {lab: 0 for lab in LABELS}
        for lab in self.labels.values():
            out[lab] += 1
        return out

    def rows(self, d: PerturbationDataset, label: str) -> np.ndarray:
        if label not in LABELS:
            raise UsageError(f"unknown split label {label!r}")
        return np.array([i for i, cid in enumerate(d.cell_ids)
                         if self.labels[cid] == label], dtype=int)

    def check_covers(self, d: PerturbationDataset) -> None:
        ids = set(d.cell_ids)
        missing = ids - set(self.labels)
        if missing:
            raise UsageError(f"split misses cell {sorted(missing)[0]!r} "
                             f"({len(missing)} total)")
        unknown = set(self.labels) - ids
        if unknown:
            raise UsageError(f"split names unknown cell {sorted(unknown)[0]!r} "
                             f"({len(unknown)} total)")


def _split_key(d: PerturbationDataset, spec: SplitSpec) -> str:
    key = spec.covariate_key or (d.meta.covariate_keys[0] if d.meta.covariate_keys else None)
    if key is None:
        raise UsageError("dataset has no covariate keys to split on")
    if key not in d.meta.covariate_keys:
        raise UsageError(f"unknown covariate key {key!r}")
    return key


def _perts_by_level(d: PerturbationDataset, key: str) -> dict[str, list[tuple[str, ...]]]:
    by_level: dict[str, set[tuple[str, ...]]] = {}
    for i in range(d.n_cells):
        if d.is_control(i):
            by_level.setdefault(d.covariates[key][i], set())
            continue
        by_level.setdefault(d.covariates[key][i], set()).add(
            tuple(sorted(d.perturbations[i])))
    return {lev: sorted(ps) for lev, ps in sorted(by_level.items())}


def _divide_val_test(units: list, ratio: float, rng) -> tuple[set, set]:
    order = [units[i] for i in rng.permutation(len(units))]
    n_val = _round_half_up(ratio * len(order))
    return set(order[:n_val]), set(order[n_val:])


def split_covariate_transfer(d: PerturbationDataset, spec: SplitSpec) -> SplitAssignment:
    """Hold out a fraction of the perturbations of up to m covariate levels.

    Every held-out (perturbation, level) pair is guaranteed to have that
    perturbation in train under some other level; infeasible draws are
    rejected and resampled up to spec.max_retries times.
    """
    if spec.kind != "covariate_transfer":
        raise UsageError(f"spec kind is {spec.kind!r}")
    key = _split_key(d, spec)
    by_level = _perts_by_level(d, key)
    levels = sorted(by_level)
    if len(levels) < 2:
        raise UsageError(f"covariate_transfer needs >= 2 levels on {key!r}")
    rng = np.random.default_rng(spec.seed)

    holdout = None
    for _ in range(spec.max_retries):
        h = int(rng.integers(1, min(spec.m, len(levels)) + 1))
        picked = rng.choice(len(levels), size=h, replace=False)
        held_levels = [levels[i] for i in sorted(picked)]
        candidate: dict[str, set[tuple[str, ...]]] = {}
        feasible = True
        for lev in held_levels:
            perts = by_level[lev]
            n_hold = max(1, _round_half_up(spec.f * len(perts)))
            if len(perts) - n_hold < spec.min_perturbations_per_level:
                feasible = False
                break
            chosen = rng.choice(len(perts), size=n_hold, replace=False)
            candidate[lev] = {perts[i] for i in chosen}
        if not feasible:
            continue
        for lev in levels:
            kept = len(by_level[lev]) - len(candidate.get(lev, ()))
            if kept < spec.min_perturbations_per_level:
                feasible = False
        if not feasible:
            continue
        for lev, chosen in candidate.items():
            for p in chosen:
                seen_elsewhere = any(
                    p in by_level[other] and p not in candidate.get(other, ())
                    for other in levels if other != lev)
                if not seen_elsewhere:
                    feasible = False
                    break
            if not feasible:
                break
        if feasible:
            holdout = candidate
            break
    if holdout is None:
        raise SplitError(
            f"no feasible covariate_transfer split in {spec.max_retries} tries "
            f"(f={spec.f}, m={spec.m}, min={spec.min_perturbations_per_level})")

    pairs = sorted((lev, p) for lev, chosen in holdout.items() for p in chosen)
    val_pairs, test_pairs = _divide_val_test(pairs, spec.val_test_ratio, rng)
    labels = {}
    for i, cid in enumerate(d.cell_ids):
        if d.is_control(i):
            labels[cid] = "train"
            continue
        pair = (d.covariates[key][i], tuple(sorted(d.perturbations[i])))
        labels[cid] = "val" if pair in val_pairs else (
            "test" if pair in test_pairs else "train")
    return SplitAssignment(labels)


def split_combo(d: PerturbationDataset, spec: SplitSpec) -> SplitAssignment:
    """Combination splits.

    combo: all singleton cells train, a fraction f of combinations held out.
    inverse_combo: for sampled pairs, the dual and one singleton stay in train
    while the other singleton is held out.
    """
    if spec.kind not in ("combo", "inverse_combo"):
        raise UsageError(f"spec kind is {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    all_perts = {tuple(sorted(p)) for i, p in enumerate(d.perturbations)
                 if not d.is_control(i)}
    singles = {p[0] for p in all_perts if len(p) == 1}
    combos = sorted(p for p in all_perts if len(p) >= 2)
    if not combos:
        raise SplitError("dataset has no perturbation combinations")

    if spec.kind == "combo":
        eligible = [c for c in combos if all(m in singles for m in c)]
        blocked = [c for c in combos if c not in eligible]
        if blocked:
            log.warning("%d combination(s) have constituents never seen as "
                        "singletons and stay in train: %s", len(blocked),
                        ", ".join("+".join(c) for c in blocked[:5]))
        if not eligible:
            raise SplitError("no combination has all constituents as singletons")
        n_hold = min(len(eligible), max(1, _round_half_up(spec.f * len(eligible))))
        chosen_idx = rng.choice(len(eligible), size=n_hold, replace=False)
        held = [eligible[i] for i in sorted(chosen_idx)]
        val_set, test_set = _divide_val_test(held, spec.val_test_ratio, rng)
        labels = {}
        for i, cid in enumerate(d.cell_ids):
            pert = tuple(sorted(d.perturbations[i]))
            labels[cid] = "val" if pert in val_set else (
                "test" if pert in test_set else "train")
        return SplitAssignment(labels)

    # inverse_combo
    duals = [c for c in combos if len(c) == 2 and all(m in singles for m in c)]
    if not duals:
        raise SplitError("inverse_combo needs dual perturbations whose "
                         "constituents appear as singletons")
    n_pairs = min(len(duals), max(1, _round_half_up(spec.f * len(duals))))
    held_singles = None
    for _ in range(spec.max_retries):
        picked = rng.choice(len(duals), size=n_pairs, replace=False)
        sampled = [duals[i] for i in picked]
        held: set[str] = set()
        ok = True
        for a, b in sampled:
            in_held = (a in held) + (b in held)
            if in_held == 1:
                continue
            if in_held == 2:
                ok = False
                break
            # neither held yet: pick one that breaks no earlier pair
            options = [a, b] if rng.random() < 0.5 else [b, a]
            added = False
            for cand in options:
                if all((x in held) + (y in held) + (cand in (x, y)) <= 1
                       for x, y in sampled if cand in (x, y) and (x, y) != (a, b)):
                    held.add(cand)
                    added = True
                    break
            if not added:
                ok = False
                break
        if ok and all((a in held) + (b in held) == 1 for a, b in sampled):
            held_singles = held
            break
    if held_singles is None:
        raise SplitError(f"no consistent inverse_combo draw in {spec.max_retries} tries")
    units = sorted((s,) for s in held_singles)
    val_set, test_set = _divide_val_test(units, spec.val_test_ratio, rng)
    labels = {}
    for i, cid in enumerate(d.cell_ids):
        pert = tuple(sorted(d.perturbations[i]))
        labels[cid] = "val" if pert in val_set else (
            "test" if pert in test_set else "train")
    return SplitAssignment(labels)


def make_split(d: PerturbationDataset, spec: SplitSpec) -> SplitAssignment:
    if spec.kind == "covariate_transfer":
        assignment = split_covariate_transfer(d, spec)
    else:
        assignment = split_combo(d, spec)
    return assignment


# ---------------------------------------------------------------------------
# imbalance


def compute_imbalance(counts_per_level) -> float:
    """Normalized-entropy imbalance of per-level counts: 0 balanced, 1 degenerate.

    Defined as 1 - H/log(k) with H the Shannon entropy of the count shares and
    the convention 0*log(0) = 0. All-equal counts return exactly 0 and a single
    non-zero level returns exactly 1, so the boundary cases are float-safe.
    """
    arr = np.asarray(list(counts_per_level), dtype=np.float64)
    k = arr.size
    if k < 2:
        raise UsageError(f"imbalance needs >= 2 levels, got {k}")
    if np.any(arr < 0) or np.any(~np.isfinite(arr)) or arr.sum() <= 0:
        raise UsageError("counts must be non-negative with a positive total")
    nonzero = arr[arr > 0]
    if nonzero.size == 1:
        return 1.0
    if np.all(arr == arr[0]):
        return 0.0
    p = nonzero / arr.sum()
    h = float(-(p * np.log(p)).sum())
    return float(min(max(1.0 - h / np.log(k), 0.0), 1.0))


def downsample_to_imbalance(d: PerturbationDataset, target_balance: float, seed,
                            covariate_key: str | None = None,
                            min_perturbations_per_level: int = 1,
                            max_retries: int = 1000) -> PerturbationDataset:
    """Subsample perturbations per level until balance = 1 - imbalance hits target.

    The level with the most perturbations keeps all of them; other levels draw
    a uniform perturbation count until the achieved balance is within +-0.02 of
    the target. Controls are always kept.
    """
    if not 0 < target_balance <= 1:
        raise UsageError(f"target_balance must be in (0,1], got {target_balance}")
    key = covariate_key or (d.meta.covariate_keys[0] if d.meta.covariate_keys else None)
    if key is None or key not in d.meta.covariate_keys:
        raise UsageError(f"unknown covariate key {key!r}")
    by_level = _perts_by_level(d, key)
    levels = sorted(by_level)
    if len(levels) < 2:
        raise UsageError("downsampling needs >= 2 covariate levels")
    if target_balance == 1.0:
        return d
    ref = max(levels, key=lambda lev: (len(by_level[lev]), lev))
    others = [lev for lev in levels if lev != ref]
    lo = min_perturbations_per_level
    if any(len(by_level[lev]) < lo for lev in levels):
        raise UsageError("a level has fewer perturbations than the minimum")

    rng = np.random.default_rng(seed)
    chosen_counts = None
    for _ in range(max_retries):
        counts = {ref: len(by_level[ref])}
        for lev in others:
            counts[lev] = int(rng.integers(lo, len(by_level[lev]) + 1))
        balance = 1.0 - compute_imbalance([counts[lev] for lev in levels])
        if abs(balance - target_balance) <= 0.02:
            chosen_counts = counts
            break
    if chosen_counts is None:
        raise SplitError(
            f"could not reach balance {target_balance} within +-0.02 in "
            f"{max_retries} draws (min={lo})")

    kept_per_level = {ref: set(by_level[ref])}
    for lev in others:
        idx = rng.choice(len(by_level[lev]), size=chosen_counts[lev], replace=False)
        kept_per_level[lev] = {by_level[lev][i] for i in idx}
    rows = [i for i in range(d.n_cells)
            if d.is_control(i)
            or tuple(sorted(d.perturbations[i])) in kept_per_level[d.covariates[key][i]]]
    return d.subset_cells(rows)


def apply_train_level_restriction(d: PerturbationDataset, assignment: SplitAssignment,
                                  levels: Sequence[str],
                                  covariate_key: str | None = None):
    """Drop train cells (controls included) outside the listed covariate levels.

    Realizes nested data-scaling subsets: val/test stay fixed while the train
    pool shrinks to the given levels. Returns (subset dataset, assignment).
    """
    key = covariate_key or (d.meta.covariate_keys[0] if d.meta.covariate_keys else None)
    if key is None or key not in d.meta.covariate_keys:
        raise UsageError(f"unknown covariate key {covariate_key!r}")
    allowed = set(levels)
    rows = [i for i, cid in enumerate(d.cell_ids)
            if assignment.labels[cid] != "train" or d.covariates[key][i] in allowed]
    sub = d.subset_cells(rows)
    return sub, SplitAssignment({cid: assignment.labels[cid] for cid in sub.cell_ids})


# ---------------------------------------------------------------------------
# split CSV


def save_split(assignment: SplitAssignment, path: str,
               order: Sequence[str] | None = None) -> None:
    ids = list(order) if order is not None else sorted(assignment.labels)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell_id", "split"])
        for cid in ids:
            w.writerow([cid, assignment.labels[cid]])


def load_split(path: str, d: PerturbationDataset | None = None) -> SplitAssignment:
    labels: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["cell_id", "split"]:
            raise FormatError(f"{path}: header must be cell_id,split")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}: bad row {row!r}")
            cid, lab = row
            if lab not in LABELS:
                raise FormatError(f"{path}: unknown label {lab!r} for cell {cid!r}")
            if cid in labels:
                raise FormatError(f"{path}: duplicate cell {cid!r}")
            labels[cid] = lab
    assignment = SplitAssignment(labels)
    if d is not None:
        assignment.check_covers(d)
    return assignment
