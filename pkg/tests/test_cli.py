"""End-to-end command-line runs: config handling, artifacts, reproducibility."""

import json
import subprocess
import sys

import pytest

from perturbkit.cli import (_schema, format_value, main, read_config_file,
                            resolve_config)
from perturbkit.dataset import load_dataset
from perturbkit.splits import load_split

from conftest import read_bytes_tree


def tree_without(tree: dict, name: str) -> dict:
    return {k: v for k, v in tree.items() if not k.endswith(name)}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--seed", "5",
                 "--set", "synth.n_genes=30",
                 "--set", "synth.n_perturbations=6",
                 "--set", "synth.cells_per_condition=25",
                 "--set", "synth.covariates=ct:2",
                 "--set", "synth.effect_scale=0.8"]) == 0
    return out


@pytest.fixture(scope="module")
def split_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    assert main(["split", "--out", str(out), "--seed", "3",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", "split.kind=covariate_transfer",
                 "--set", "split.covariate_key=ct"]) == 0
    return out


@pytest.fixture(scope="module")
def train_dir(sim_dir, split_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), "--seed", "1",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"split={split_dir}/split.csv",
                 "--set", "model.architecture=linear",
                 "--set", "model.max_epochs=30",
                 "--set", "model.patience=5",
                 "--set", "model.batch_size=64"]) == 0
    return out


@pytest.fixture(scope="module")
def pred_dir(sim_dir, split_dir, train_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("pred")
    assert main(["predict", "--out", str(out), "--seed", "2",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"model={train_dir}/model",
                 "--set", f"split={split_dir}/split.csv",
                 "--set", "conditions=heldout",
                 "--set", "n_controls=25"]) == 0
    return out


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    err = capsys.readouterr().err
    assert err.startswith("E_USAGE:")
    assert err.count("\n") == 1


def test_unknown_subcommand(capsys):
    assert main(["transmogrify"]) == 1
    assert capsys.readouterr().err.startswith("E_USAGE:")


def test_unknown_config_key_rejected(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["simulate", "--out", str(out), "--set", "bogus=1"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("E_USAGE:") and "bogus" in err
    assert not out.exists()


def test_bad_set_syntax(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "o"),
                 "--set", "noequals"]) == 1
    assert capsys.readouterr().err.startswith("E_USAGE:")


def test_bad_value_names_key(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "o"),
                 "--set", "synth.n_genes=many"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("E_USAGE:") and "synth.n_genes" in err


def test_config_file_with_comments_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny screen\n\nsynth.n_genes = 40\n"
                   "synth.n_perturbations = 3\nsynth.cells_per_condition = 10\n")
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--out", str(out),
                 "--set", "synth.n_genes=25"]) == 0
    d = load_dataset(str(out / "dataset"))
    assert d.n_genes == 25  # --set wins over the file
    resolved = read_config_file(str(out / "resolved.cfg"))
    assert resolved["synth.n_genes"] == "25"
    assert resolved["out"] == str(out)


def test_malformed_config_file(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("just some words\n")
    assert main(["simulate", "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("E_USAGE:")


def test_simulate_outputs(sim_dir):
    d = load_dataset(str(sim_dir / "dataset"))
    assert d.n_genes == 30
    assert d.n_cells == 2 * (6 + 1) * 25
    assert (sim_dir / "truth_means.tsv").exists()
    assert (sim_dir / "truth_logfc.tsv").exists()
    assert (sim_dir / "resolved.cfg").exists()


def test_rerun_with_resolved_config_is_byte_identical(sim_dir, tmp_path):
    resolved = tmp_path / "copy.cfg"
    resolved.write_bytes((sim_dir / "resolved.cfg").read_bytes())
    before = read_bytes_tree(sim_dir)
    assert main(["simulate", "--config", str(resolved)]) == 0
    assert read_bytes_tree(sim_dir) == before


def test_same_seed_other_directory_matches(sim_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["simulate", "--out", str(out), "--seed", "5",
                 "--set", "synth.n_genes=30",
                 "--set", "synth.n_perturbations=6",
                 "--set", "synth.cells_per_condition=25",
                 "--set", "synth.covariates=ct:2",
                 "--set", "synth.effect_scale=0.8"]) == 0
    a = tree_without(read_bytes_tree(sim_dir), "resolved.cfg")
    b = tree_without(read_bytes_tree(out), "resolved.cfg")
    assert a == b  # only the recorded out path may differ


def test_split_outputs(sim_dir, split_dir):
    d = load_dataset(str(sim_dir / "dataset"))
    assignment = load_split(str(split_dir / "split.csv"), d)
    counts = assignment.counts()
    assert counts["train"] > 0 and counts["val"] > 0 and counts["test"] > 0


def test_train_emits_archive_and_history(train_dir):
    history = json.loads((train_dir / "history.json").read_text())
    assert history["best_epoch"] >= 0
    assert len(history["train_loss"]) >= 1
    assert (train_dir / "model" / "params.bin").exists()


def test_predict_then_evaluate_and_diagnose(sim_dir, split_dir, pred_dir,
                                            tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["evaluate", "--out", str(out),
                 "--set", f"predictions={pred_dir}/predictions.tsv",
                 "--set", f"predictions_logfc={pred_dir}/predictions_logfc.tsv",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"split={split_dir}/split.csv",
                 "--set", "subset=heldout"]) == 0
    summary = dict(ln.split("\t") for ln in
                   (out / "summary.tsv").read_text().splitlines()[1:])
    assert float(summary["rmse"]) >= 0
    assert 0.0 <= float(summary["rank_rmse_average"]) <= 1.0
    payload = json.loads((out / "report.json").read_text())
    assert payload["provenance"]["subcommand"] == "evaluate"
    assert len(payload["per_condition"]) == int(summary["n_conditions"])

    out2 = tmp_path / "diag"
    assert main(["diagnose", "--out", str(out2),
                 "--set", f"predictions={pred_dir}/predictions.tsv",
                 "--set", f"predictions_logfc={pred_dir}/predictions_logfc.tsv",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"split={split_dir}/split.csv",
                 "--set", "subset=heldout"]) == 0
    assert "verdict:" in capsys.readouterr().out
    diag = json.loads((out2 / "diagnosis.json").read_text())
    assert diag["verdict"] in ("no collapse signal", "mixed signal",
                               "collapse signal")


def test_evaluate_requires_one_observed_source(pred_dir, sim_dir, tmp_path,
                                               capsys):
    args = ["evaluate", "--out", str(tmp_path / "o"),
            "--set", f"predictions={pred_dir}/predictions.tsv"]
    assert main(args) == 1
    assert capsys.readouterr().err.startswith("E_USAGE:")
    assert main(args + ["--set", f"data={sim_dir}/dataset",
                        "--set", f"observed={pred_dir}/predictions.tsv"]) == 1
    assert capsys.readouterr().err.startswith("E_USAGE:")


def test_evaluate_against_observed_tables(sim_dir, pred_dir, tmp_path):
    agg = tmp_path / "agg"
    assert main(["preprocess", "--out", str(agg),
                 "--set", f"data={sim_dir}/dataset",
                 "--set", "min_cells=5",
                 "--set", "write_dataset=false"]) == 0
    out = tmp_path / "eval"
    assert main(["evaluate", "--out", str(out),
                 "--set", f"predictions={pred_dir}/predictions.tsv",
                 "--set", f"predictions_logfc={pred_dir}/predictions_logfc.tsv",
                 "--set", f"observed={agg}/aggregates.tsv",
                 "--set", f"observed_logfc={agg}/logfc.tsv"]) == 0
    assert (out / "per_condition.tsv").exists()


def test_predict_subset_requires_split(sim_dir, train_dir, tmp_path, capsys):
    assert main(["predict", "--out", str(tmp_path / "o"),
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"model={train_dir}/model",
                 "--set", "conditions=val"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("E_USAGE:") and "split" in err


def test_predict_gene_mismatch(train_dir, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["simulate", "--out", str(other), "--seed", "5",
                 "--set", "synth.n_genes=20",
                 "--set", "synth.n_perturbations=3",
                 "--set", "synth.cells_per_condition=10"]) == 0
    assert main(["predict", "--out", str(tmp_path / "o"),
                 "--set", f"data={other}/dataset",
                 "--set", f"model={train_dir}/model"]) == 1
    assert capsys.readouterr().err.startswith("E_GENE_MISMATCH:")


def test_failure_removes_created_outputs(tmp_path, capsys):
    out = tmp_path / "fresh"
    assert main(["evaluate", "--out", str(out),
                 "--set", "predictions=/nonexistent/p.tsv",
                 "--set", "observed=/nonexistent/o.tsv"]) == 1
    assert capsys.readouterr().err.startswith("E_IO:")
    assert not out.exists()

    out = tmp_path / "existing"
    out.mkdir()
    (out / "keep.txt").write_text("mine\n")
    assert main(["evaluate", "--out", str(out),
                 "--set", "predictions=/nonexistent/p.tsv",
                 "--set", "observed=/nonexistent/o.tsv"]) == 1
    assert (out / "keep.txt").read_text() == "mine\n"
    assert not (out / "resolved.cfg").exists()


def test_train_rerun_is_byte_identical(sim_dir, split_dir, train_dir, tmp_path):
    out = tmp_path / "t2"
    assert main(["train", "--out", str(out), "--seed", "1",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"split={split_dir}/split.csv",
                 "--set", "model.architecture=linear",
                 "--set", "model.max_epochs=30",
                 "--set", "model.patience=5",
                 "--set", "model.batch_size=64"]) == 0
    a = tree_without(read_bytes_tree(train_dir), "resolved.cfg")
    b = tree_without(read_bytes_tree(out), "resolved.cfg")
    assert a == b


def test_hpo_quick_and_best_config_feeds_train(sim_dir, split_dir, tmp_path):
    out = tmp_path / "hpo"
    assert main(["hpo", "--out", str(out), "--seed", "7",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"split={split_dir}/split.csv",
                 "--set", "model.architecture=linear",
                 "--set", "model.max_epochs=8",
                 "--set", "model.batch_size=64",
                 "--set", "hpo.n_trials=3",
                 "--set", "hpo.n_controls=20",
                 "--set", "hpo.stability_seeds=2"]) == 0
    lines = (out / "trials.tsv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split("\t")[:3] == ["trial", "objective", "rmse_mean"]
    stats = json.loads((out / "stability.json").read_text())
    assert len(stats["seeds"]) == 2
    assert stats["objective_mean"] is not None

    tdir = tmp_path / "trained"
    assert main(["train", "--config", str(out / "best_config.cfg"),
                 "--out", str(tdir), "--seed", "1",
                 "--set", f"data={sim_dir}/dataset",
                 "--set", f"split={split_dir}/split.csv",
                 "--set", "model.max_epochs=5"]) == 0
    assert (tdir / "model" / "config.tsv").exists()


def test_threads_flag_recorded(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--out", str(out), "--threads", "2",
                 "--set", "synth.n_genes=10",
                 "--set", "synth.n_perturbations=2",
                 "--set", "synth.cells_per_condition=5"]) == 0
    assert read_config_file(str(out / "resolved.cfg"))["threads"] == "2"


def test_schema_defaults_round_trip_through_text():
    for command in ("simulate", "preprocess", "split", "train", "predict",
                    "evaluate", "diagnose", "hpo"):
        schema = _schema(command)
        for name, key in schema.items():
            if key.default is None:
                continue
            assert key.parse(format_value(key.default)) == key.default, name


def test_resolved_config_reparses_identically(sim_dir):
    schema = _schema("simulate")
    cfg = resolve_config(schema, read_config_file(str(sim_dir / "resolved.cfg")))
    assert cfg["synth.n_genes"] == 30
    assert cfg["synth.covariates"] == (("ct", 2),)
    assert cfg["seed"] == 5


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "perturbkit", "transmogrify"],
                       capture_output=True, text=True)
    assert r.returncode == 1
    assert r.stderr.startswith("E_USAGE:")
    assert r.stderr.strip().count("\n") == 0
