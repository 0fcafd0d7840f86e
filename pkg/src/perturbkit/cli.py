"""Command-line pipeline driver.

Every subcommand reads a flat ``key = value`` configuration (file plus ``--set``
overrides), writes all artifacts under one output directory, and records the
fully resolved configuration next to them as resolved.cfg. Re-running a
subcommand with that file reproduces the outputs byte for byte. Failures exit
with status 1 and a single ``E_CODE: message`` line on stderr, and any files
the failed run created are removed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from collections.abc import Callable

from . import models, synth
from .dataset import (build_control_index, build_counterfactual_requests,
                      fmt_float, load_dataset, save_dataset)
from .errors import PerturbkitError, UsageError, ValidationError
from .evaluate import (_json_safe, diagnose_collapse, evaluate, write_report)
from .hpo import DEFAULT_SPACES, hpo_search, stability_reruns
from .metrics import RANK_SCOPES
from .preprocess import (aggregate_means, compute_logfc, log_normalize,
                         read_aggregates, select_genes, tables_to_aggregates,
                         write_aggregates)
from .splits import (SPLIT_KINDS, SplitSpec, apply_train_level_restriction,
                     load_split, make_split, save_split)

PROG = "perturbkit"
RESOLVED_NAME = "resolved.cfg"
CONDITION_SUBSETS = ("all", "val", "test", "heldout")


# ---------------------------------------------------------------------------
# flat key = value configuration


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return parse


def _parse_str_list(text: str) -> tuple[str, ...]:
    items = tuple(t.strip() for t in text.split(",") if t.strip())
    if not items:
        raise ValueError("expected a comma-separated list")
    return items


def _parse_cov_levels(text: str) -> tuple[tuple[str, int], ...]:
    """'cell_type:3,batch:2' -> (('cell_type', 3), ('batch', 2))."""
    out = []
    for item in _parse_str_list(text):
        key, sep, n = item.partition(":")
        if not sep or not key.strip():
            raise ValueError(f"expected key:n_levels, got {item!r}")
        out.append((key.strip(), int(n)))
    return tuple(out)


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt_float(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{k}:{n}" for k, n in v)
        return ",".join(v)
    return str(v)


@dataclasses.dataclass(frozen=True)
class ConfigKey:
    name: str
    parse: Callable[[str], object]
    default: object = None
    required: bool = False


def read_config_file(path: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            key, sep, value = s.partition("=")
            key = key.strip()
            if not sep or not key:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            raw[key] = value.strip()
    return raw


def resolve_config(schema: dict[str, ConfigKey], raw: dict[str, str]) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = {}
    for name, key in schema.items():
        text = raw.get(name, "")
        if text != "":
            try:
                cfg[name] = key.parse(text)
            except ValueError as e:
                raise UsageError(f"config key {name}: {e}") from e
        elif key.required:
            raise UsageError(f"missing required config key {name!r}")
        else:
            cfg[name] = key.default
    return cfg


def write_config(cfg: dict, path: str, header: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {header}\n")
        for name in sorted(cfg):
            f.write(f"{name} = {format_value(cfg[name])}\n")


# ---------------------------------------------------------------------------
# per-subcommand schemas


def _common_keys() -> dict[str, ConfigKey]:
    return {
        "out": ConfigKey("out", _parse_str, required=True),
        "seed": ConfigKey("seed", _parse_int, 0),
        "threads": ConfigKey("threads", _parse_int, os.cpu_count() or 1),
    }


_MODEL_PARSERS = {
    "architecture": _choice(*models.ARCHITECTURES),
    "latent_dim": _parse_int,
    "n_layers": _parse_int,
    "hidden_width": _parse_int,
    "dropout": _parse_float,
    "layer_norm": _parse_bool,
    "softplus_output": _parse_bool,
    "decoder_input": _choice(*models.DECODER_INPUTS),
    "lr": _parse_float,
    "weight_decay": _parse_float,
    "batch_size": _parse_int,
    "max_epochs": _parse_int,
    "patience": _parse_int,
    "val_controls": _parse_int,
    "ema_decay": _parse_float,
}


def _model_keys() -> dict[str, ConfigKey]:
    base = models.ModelConfig("linear")
    out = {}
    for field, parse in _MODEL_PARSERS.items():
        name = f"model.{field}"
        out[name] = ConfigKey(name, parse, getattr(base, field))
    return out


_SYNTH_PARSERS = {
    "n_genes": _parse_int,
    "n_perturbations": _parse_int,
    "covariates": _parse_cov_levels,
    "cells_per_condition": _parse_int,
    "n_combos": _parse_int,
    "effect_sparsity": _parse_int,
    "effect_scale": _parse_float,
    "covariate_scale": _parse_float,
    "interaction_fraction": _parse_float,
    "interaction_scale": _parse_float,
    "cell_noise": _parse_float,
    "library_log_mean": _parse_float,
    "library_log_sd": _parse_float,
}


def _synth_keys() -> dict[str, ConfigKey]:
    base = synth.SynthSpec()
    out = {}
    for field, parse in _SYNTH_PARSERS.items():
        name = f"synth.{field}"
        out[name] = ConfigKey(name, parse, getattr(base, field))
    return out


def _split_keys() -> dict[str, ConfigKey]:
    defaults = {f.name: f.default for f in dataclasses.fields(SplitSpec)}
    return {
        "split.kind": ConfigKey("split.kind", _choice(*SPLIT_KINDS), required=True),
        "split.covariate_key": ConfigKey("split.covariate_key", _parse_str),
        "split.m": ConfigKey("split.m", _parse_int, defaults["m"]),
        "split.f": ConfigKey("split.f", _parse_float, defaults["f"]),
        "split.val_test_ratio": ConfigKey(
            "split.val_test_ratio", _parse_float, defaults["val_test_ratio"]),
        "split.min_perturbations_per_level": ConfigKey(
            "split.min_perturbations_per_level", _parse_int,
            defaults["min_perturbations_per_level"]),
        "split.max_retries": ConfigKey(
            "split.max_retries", _parse_int, defaults["max_retries"]),
        "split.train_levels": ConfigKey("split.train_levels", _parse_str_list),
    }


def _eval_source_keys() -> dict[str, ConfigKey]:
    """Keys shared by evaluate and diagnose: where predictions and truth live."""
    return {
        "predictions": ConfigKey("predictions", _parse_str, required=True),
        "predictions_logfc": ConfigKey("predictions_logfc", _parse_str),
        "observed": ConfigKey("observed", _parse_str),
        "observed_logfc": ConfigKey("observed_logfc", _parse_str),
        "data": ConfigKey("data", _parse_str),
        "split": ConfigKey("split", _parse_str),
        "subset": ConfigKey("subset", _choice(*CONDITION_SUBSETS), "all"),
        "normalize": ConfigKey("normalize", _parse_bool, True),
        "min_cells": ConfigKey("min_cells", _parse_int, 1),
        "delimiter": ConfigKey("delimiter", _parse_str, "+"),
        "control_value": ConfigKey("control_value", _parse_str, "control"),
    }


def _schema(command: str) -> dict[str, ConfigKey]:
    keys = _common_keys()
    if command == "simulate":
        keys.update(_synth_keys())
    elif command == "preprocess":
        keys.update({
            "data": ConfigKey("data", _parse_str, required=True),
            "normalize": ConfigKey("normalize", _parse_bool, True),
            "n_hvg": ConfigKey("n_hvg", _parse_int, 0),
            "n_de_per_condition": ConfigKey("n_de_per_condition", _parse_int, 0),
            "include_perturbed_genes": ConfigKey(
                "include_perturbed_genes", _parse_bool, True),
            "min_cells": ConfigKey("min_cells", _parse_int, 10),
            "write_dataset": ConfigKey("write_dataset", _parse_bool, True),
        })
    elif command == "split":
        keys["data"] = ConfigKey("data", _parse_str, required=True)
        keys.update(_split_keys())
    elif command == "train":
        keys.update({
            "data": ConfigKey("data", _parse_str, required=True),
            "split": ConfigKey("split", _parse_str, required=True),
            "normalize": ConfigKey("normalize", _parse_bool, True),
        })
        keys.update(_model_keys())
    elif command == "predict":
        keys.update({
            "data": ConfigKey("data", _parse_str, required=True),
            "model": ConfigKey("model", _parse_str, required=True),
            "split": ConfigKey("split", _parse_str),
            "conditions": ConfigKey(
                "conditions", _choice(*CONDITION_SUBSETS), "all"),
            "normalize": ConfigKey("normalize", _parse_bool, True),
            "n_controls": ConfigKey("n_controls", _parse_int, 100),
            "delimiter": ConfigKey("delimiter", _parse_str, "+"),
        })
    elif command in ("evaluate", "diagnose"):
        keys.update(_eval_source_keys())
        keys["rank_scope"] = ConfigKey(
            "rank_scope", _choice(*RANK_SCOPES), "global")
    elif command == "hpo":
        keys.update({
            "data": ConfigKey("data", _parse_str, required=True),
            "split": ConfigKey("split", _parse_str, required=True),
            "normalize": ConfigKey("normalize", _parse_bool, True),
            "hpo.n_trials": ConfigKey("hpo.n_trials", _parse_int, 60),
            "hpo.n_controls": ConfigKey("hpo.n_controls", _parse_int, 100),
            "hpo.stability_seeds": ConfigKey("hpo.stability_seeds", _parse_int, 5),
        })
        keys.update(_model_keys())
    else:
        raise UsageError(f"unknown subcommand {command!r}")
    return keys


# ---------------------------------------------------------------------------
# shared pieces


def _say(path: str) -> None:
    print(f"wrote {path}")


def _ensure_lognorm(d, normalize: bool):
    if d.meta.value_space == "lognorm":
        return d
    if not normalize:
        raise UsageError("dataset holds raw counts; set normalize = true or "
                         "preprocess it first")
    return log_normalize(d)


def _model_config(cfg: dict, seed: int) -> models.ModelConfig:
    kwargs = {field: cfg[f"model.{field}"] for field in _MODEL_PARSERS}
    return models.ModelConfig(seed=seed, **kwargs)


def _condition_subset(d, which: str, split_path: str | None):
    """Non-control conditions to predict or score, optionally split-restricted."""
    ctrl = d.meta.control_value
    if which == "all":
        conds = [c for c in d.distinct_conditions() if not c.is_control(ctrl)]
    else:
        if not split_path:
            raise UsageError(f"subset {which!r} needs a split file")
        assignment = load_split(split_path, d)
        labels = ("val", "test") if which == "heldout" else (which,)
        rows = [i for label in labels for i in assignment.rows(d, label)]
        conds = sorted({d.condition_of(int(i)) for i in rows
                        if not d.is_control(int(i))})
    if not conds:
        raise ValidationError(f"no perturbed conditions in subset {which!r}")
    return sorted(conds)


def _subset_rows(d, which: str, split_path: str | None):
    """Row indices for observed aggregation: subset cells plus every control."""
    if which == "all":
        return None
    if not split_path:
        raise UsageError(f"subset {which!r} needs a split file")
    assignment = load_split(split_path, d)
    labels = ("val", "test") if which == "heldout" else (which,)
    keep = set(int(i) for label in labels for i in assignment.rows(d, label))
    keep.update(int(i) for i in d.control_rows())
    return sorted(keep)


def _load_eval_aggregates(cfg: dict):
    """Predicted and observed condition aggregates per the evaluate config."""
    if (cfg["observed"] is None) == (cfg["data"] is None):
        raise UsageError("provide exactly one of 'observed' (aggregate table) "
                         "or 'data' (dataset directory)")
    delim = cfg["delimiter"]
    control_value = cfg["control_value"]

    means = read_aggregates(cfg["predictions"], delimiter=delim)
    logfc = (read_aggregates(cfg["predictions_logfc"], delimiter=delim)
             if cfg["predictions_logfc"] else None)
    preds = tables_to_aggregates(means, logfc)

    if cfg["observed"] is not None:
        means = read_aggregates(cfg["observed"], delimiter=delim)
        logfc = (read_aggregates(cfg["observed_logfc"], delimiter=delim)
                 if cfg["observed_logfc"] else None)
        obs = tables_to_aggregates(means, logfc)
    else:
        d = _ensure_lognorm(load_dataset(cfg["data"]), cfg["normalize"])
        control_value = d.meta.control_value
        rows = _subset_rows(d, cfg["subset"], cfg["split"])
        if rows is not None:
            d = d.subset_cells(rows)
        obs = aggregate_means(d, min_cells=cfg["min_cells"])
        obs = compute_logfc(obs, control_value=control_value)
    return preds, obs, control_value


def _write_json(payload, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(payload), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict) -> None:
    spec_kwargs = {field: cfg[f"synth.{field}"] for field in _SYNTH_PARSERS}
    spec = synth.SynthSpec(seed=cfg["seed"], **spec_kwargs)
    counts, truth = synth.generate(spec)
    data_dir = os.path.join(cfg["out"], "dataset")
    save_dataset(counts, data_dir)
    _say(data_dir)
    synth.export_truth(truth, cfg["out"])
    _say(os.path.join(cfg["out"], "truth_means.tsv"))
    _say(os.path.join(cfg["out"], "truth_logfc.tsv"))


def cmd_preprocess(cfg: dict) -> None:
    d = _ensure_lognorm(load_dataset(cfg["data"]), cfg["normalize"])
    if cfg["n_hvg"] or cfg["n_de_per_condition"]:
        d, _ = select_genes(d, cfg["n_hvg"], cfg["n_de_per_condition"],
                            cfg["include_perturbed_genes"])
    if cfg["write_dataset"]:
        data_dir = os.path.join(cfg["out"], "dataset")
        save_dataset(d, data_dir)
        _say(data_dir)
    aggs = aggregate_means(d, min_cells=cfg["min_cells"])
    aggs = compute_logfc(aggs, control_value=d.meta.control_value)
    delim = d.meta.combination_delimiter
    for field, name in (("mean", "aggregates.tsv"), ("logfc", "logfc.tsv")):
        path = os.path.join(cfg["out"], name)
        write_aggregates(aggs, path, d.gene_names, field=field, delimiter=delim)
        _say(path)


def cmd_split(cfg: dict) -> None:
    d = load_dataset(cfg["data"])
    spec = SplitSpec(
        kind=cfg["split.kind"], covariate_key=cfg["split.covariate_key"],
        m=cfg["split.m"], f=cfg["split.f"],
        val_test_ratio=cfg["split.val_test_ratio"], seed=cfg["seed"],
        min_perturbations_per_level=cfg["split.min_perturbations_per_level"],
        max_retries=cfg["split.max_retries"],
        train_levels=cfg["split.train_levels"])
    assignment = make_split(d, spec)
    if spec.train_levels:
        # restriction drops train cells, so the matching dataset is written too
        d, assignment = apply_train_level_restriction(
            d, assignment, spec.train_levels, spec.covariate_key)
        data_dir = os.path.join(cfg["out"], "dataset")
        save_dataset(d, data_dir)
        _say(data_dir)
    path = os.path.join(cfg["out"], "split.csv")
    save_split(assignment, path, order=list(d.cell_ids))
    _say(path)


def cmd_train(cfg: dict) -> None:
    d = _ensure_lognorm(load_dataset(cfg["data"]), cfg["normalize"])
    assignment = load_split(cfg["split"], d)
    model = models.train_model(d, assignment, _model_config(cfg, cfg["seed"]))
    model_dir = os.path.join(cfg["out"], "model")
    models.save_model(model, model_dir)
    _say(model_dir)
    path = os.path.join(cfg["out"], "history.json")
    _write_json(model.history, path)
    _say(path)


def cmd_predict(cfg: dict) -> None:
    d = _ensure_lognorm(load_dataset(cfg["data"]), cfg["normalize"])
    model = models.load_model(cfg["model"])
    targets = _condition_subset(d, cfg["conditions"], cfg["split"])
    requests = build_counterfactual_requests(d, build_control_index(d), targets)
    preds = models.predict(model, d, requests, n_controls=cfg["n_controls"],
                           seed=cfg["seed"])
    for field, name in (("mean", "predictions.tsv"),
                        ("logfc", "predictions_logfc.tsv")):
        path = os.path.join(cfg["out"], name)
        write_aggregates(preds, path, d.gene_names, field=field,
                         delimiter=cfg["delimiter"])
        _say(path)


def cmd_evaluate(cfg: dict) -> None:
    preds, obs, control_value = _load_eval_aggregates(cfg)
    provenance = {k: format_value(v) for k, v in sorted(cfg.items())}
    provenance["subcommand"] = "evaluate"
    report = evaluate(preds, obs, rank_scope=cfg["rank_scope"],
                      control_value=control_value, provenance=provenance)
    for path in write_report(report, cfg["out"], delimiter=cfg["delimiter"]):
        _say(path)


def cmd_diagnose(cfg: dict) -> None:
    preds, obs, control_value = _load_eval_aggregates(cfg)
    diag = diagnose_collapse(preds, obs, rank_scope=cfg["rank_scope"],
                             control_value=control_value)
    path = os.path.join(cfg["out"], "diagnosis.json")
    _write_json(diag, path)
    _say(path)
    print(f"verdict: {diag['verdict']}")


def cmd_hpo(cfg: dict) -> None:
    d = _ensure_lognorm(load_dataset(cfg["data"]), cfg["normalize"])
    assignment = load_split(cfg["split"], d)
    base = _model_config(cfg, cfg["seed"])
    space = DEFAULT_SPACES[base.architecture]
    best, trials = hpo_search(d, assignment, base, n_trials=cfg["hpo.n_trials"],
                              seed=cfg["seed"], n_controls=cfg["hpo.n_controls"])

    sampled = sorted(space)
    path = os.path.join(cfg["out"], "trials.tsv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(["trial", "objective", "rmse_mean", "rank_average",
                           "error", *sampled]) + "\n")
        for t in trials:
            row = [str(t.index)]
            for v in (t.objective, t.rmse, t.rank_average):
                row.append("" if v is None else fmt_float(v))
            row.append(t.error or "")
            row += [format_value(getattr(t.config, k)) for k in sampled]
            f.write("\t".join(row) + "\n")
    _say(path)

    path = os.path.join(cfg["out"], "best_config.cfg")
    best_cfg = {f"model.{field}": getattr(best, field) for field in _MODEL_PARSERS}
    write_config(best_cfg, path, f"{PROG} hpo best trial")
    _say(path)

    if cfg["hpo.stability_seeds"] > 0:
        stats = stability_reruns(d, assignment, best,
                                 n_seeds=cfg["hpo.stability_seeds"],
                                 n_controls=cfg["hpo.n_controls"])
        path = os.path.join(cfg["out"], "stability.json")
        _write_json(stats, path)
        _say(path)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "hpo": cmd_hpo,
    "simulate": cmd_simulate,
}

_HELP = {
    "preprocess": "log-normalize, select genes and write condition aggregates",
    "split": "assign cells to train/val/test under a holdout scheme",
    "train": "fit a counterfactual model and archive it",
    "predict": "predict held-out conditions from matched controls",
    "evaluate": "score predictions and write a metric report",
    "diagnose": "check predictions for mode-collapse signatures",
    "hpo": "random-search hyperparameters and report the best trial",
    "simulate": "draw a synthetic screen with known ground truth",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="perturbation response benchmark")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name, help=_HELP[name])
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
        sp.add_argument("--out", help="output directory (same as --set out=...)")
        sp.add_argument("--seed", type=int, help="random seed")
        sp.add_argument("--threads", type=int, help="worker thread budget")
    return parser


def _gather_raw(args: argparse.Namespace) -> dict[str, str]:
    raw: dict[str, str] = {}
    if args.config:
        raw.update(read_config_file(args.config))
    for item in args.set:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        raw[key] = value.strip()
    if args.out is not None:
        raw["out"] = args.out
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.threads is not None:
        raw["threads"] = str(args.threads)
    return raw


def _snapshot(out_dir: str):
    if not os.path.isdir(out_dir):
        return False, set()
    existing = set()
    for base, _, files in os.walk(out_dir):
        for name in files:
            existing.add(os.path.join(base, name))
    return True, existing


def _cleanup(out_dir: str, existed: bool, before: set) -> None:
    if not os.path.isdir(out_dir):
        return
    if not existed:
        shutil.rmtree(out_dir, ignore_errors=True)
        return
    for base, dirs, files in os.walk(out_dir, topdown=False):
        for name in files:
            path = os.path.join(base, name)
            if path not in before:
                try:
                    os.remove(path)
                except OSError:
                    pass
        for name in dirs:
            try:
                os.rmdir(os.path.join(base, name))
            except OSError:
                pass


def _run(argv) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(_schema(args.command), _gather_raw(args))
    out_dir = cfg["out"]
    existed, before = _snapshot(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        write_config(cfg, os.path.join(out_dir, RESOLVED_NAME),
                     f"{PROG} {args.command} resolved configuration")
        COMMANDS[args.command](cfg)
    except BaseException:
        _cleanup(out_dir, existed, before)
        raise
    return 0


def main(argv=None) -> int:
    try:
        return _run(argv)
    except PerturbkitError as e:
        message = " ".join(str(e).split()) or e.code
        print(f"{e.code}: {message}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"E_IO: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as e:
        print(f"E_INTERNAL: {type(e).__name__}: {' '.join(str(e).split())}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
