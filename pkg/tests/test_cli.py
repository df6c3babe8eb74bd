"""Experiment-config and CLI tests: validation, hashing, the full command
pipeline on a small problem, provenance columns, bitwise reruns, exit codes,
and report rendering."""

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from flowsense import mesh as fmesh
from flowsense import policy as fp
from flowsense import storage
from flowsense.cli import main
from flowsense.config import ExperimentConfig, load_config, save_config
from flowsense.errors import ConfigError


def run_cli(*args):
    return main([str(a) for a in args])


def base_config_dict():
    # small enough that the whole command chain stays in the seconds range
    return {
        "geometry": {"kind": "sphere", "shape_params": [1.0], "node_count": 16,
                     "knn_degree": 3, "seed": 0},
        "snapshot_count": 8,
        "split_fractions": {"train": 0.5, "val": 0.25, "test": 0.25},
        "noise_scale": 0.02,
        "densities": [0.25, 0.5],
        "strategies": ["uniform", "random", "qr", "dopt", "policy"],
        "eval_density": 0.25,
        "basis_rank": 3,
        "knn_k": 3,
        "model": {"latent_dim": 8, "mask_latent_dim": 4, "num_layers": 1, "mlp_depth": 2},
        "train": {"epochs": 30, "batch_size": 4, "lr_start": 3e-4, "lr_end": 1e-4,
                  "densities": [0.25, 0.5], "strategies": ["random"],
                  "val_density": 0.25, "val_strategy": "random"},
        "policy_net": {"latent_dim": 8, "num_layers": 1, "mlp_depth": 2},
        "ppo": {"t1": 4, "t2": 3, "rollouts": 4, "density": 0.25, "lam": 0.1,
                "grad_steps": 2, "lr_start": 1e-4, "lr_end": 1e-5},
        "paths": {"dataset_dir": "data", "recon_checkpoint": "run/recon.ckpt",
                  "policy_checkpoint": "run/policy.ckpt"},
    }


def write_config(path, cfg_dict):
    Path(path).write_text(json.dumps(cfg_dict))
    return Path(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# experiment config


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict(base_config_dict())
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()


@pytest.mark.parametrize(
    "edit",
    [
        {"split_fractions": {"train": 0.5, "val": 0.2, "test": 0.2}},
        {"split_fractions": {"train": 1.0, "val": 0.0}},
        {"split_fractions": {"train": 1.2, "val": -0.2, "test": 0.0}},
        {"snapshot_count": 0},
        {"noise_scale": -0.1},
        {"densities": []},
        {"densities": [0.0, 0.5]},
        {"densities": [1.5]},
        {"strategies": ["uniform", "greedy"]},
        {"strategies": []},
        {"eval_density": 1.0},
        {"basis_rank": 0},
        {"knn_k": 0},
        {"paths": {"dataset": "x"}},
    ],
)
def test_config_validation(edit):
    d = base_config_dict()
    d.update(edit)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_rejects_unknown_keys():
    d = base_config_dict()
    d["momentum"] = 0.9
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict(d)


def test_config_rejects_missing_required_field():
    d = base_config_dict()
    del d["geometry"]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_hash_is_stable_and_sensitive():
    a = ExperimentConfig.from_dict(base_config_dict())
    b = ExperimentConfig.from_dict(base_config_dict())
    assert a.config_hash() == b.config_hash()
    d = base_config_dict()
    d["noise_scale"] = 0.07
    assert ExperimentConfig.from_dict(d).config_hash() != a.config_hash()


def test_split_counts():
    d = base_config_dict()
    cfg = ExperimentConfig.from_dict(d)
    assert cfg.split_counts() == {"train": 4, "val": 2, "test": 2}
    d["snapshot_count"] = 5
    d["split_fractions"] = {"train": 0.6, "val": 0.2, "test": 0.2}
    assert ExperimentConfig.from_dict(d).split_counts() == {"train": 3, "val": 1, "test": 1}
    d["snapshot_count"] = 3
    d["split_fractions"] = {"train": 1.0, "val": 0.0, "test": 0.0}
    assert ExperimentConfig.from_dict(d).split_counts() == {"train": 3, "val": 0, "test": 0}


def test_split_counts_needs_a_training_snapshot():
    d = base_config_dict()
    d["snapshot_count"] = 2
    d["split_fractions"] = {"train": 0.0, "val": 0.5, "test": 0.5}
    cfg = ExperimentConfig.from_dict(d)
    with pytest.raises(ConfigError, match="no training snapshots"):
        cfg.split_counts()


def test_cardinality_rounds_against_node_count():
    cfg = ExperimentConfig.from_dict(base_config_dict())
    assert cfg.cardinality(0.25) == 4
    assert cfg.cardinality(0.3) == 5
    assert cfg.cardinality(0.25, node_count=8) == 2


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_load_config_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(p)


def test_load_config_rejects_non_object(tmp_path):
    p = tmp_path / "list.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(p)


def test_load_config_resolves_relative_paths(tmp_path):
    d = base_config_dict()
    d["paths"] = {"dataset_dir": "data", "recon_checkpoint": "/abs/recon.ckpt"}
    cfg_dir = tmp_path / "sub"
    cfg_dir.mkdir()
    p = write_config(cfg_dir / "exp.json", d)
    cfg = load_config(p)
    assert cfg.path("dataset_dir") == cfg_dir / "data"
    assert cfg.path("recon_checkpoint") == Path("/abs/recon.ckpt")
    assert cfg.path("policy_checkpoint") is None


def test_save_load_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(base_config_dict())
    save_config(tmp_path / "exp.json", cfg)
    again = load_config(tmp_path / "exp.json")
    trip = again.to_dict()
    trip["paths"] = cfg.to_dict()["paths"]  # loading resolves against the file dir
    assert trip == cfg.to_dict()


# ---------------------------------------------------------------------------
# pipeline fixture: every command once on one small problem


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = write_config(root / "exp.json", base_config_dict())
    run = root / "run"
    assert run_cli("generate", "--config", cfg_path, "--out", root / "data") == 0
    assert run_cli("train-recon", "--config", cfg_path, "--out", run) == 0
    assert run_cli("eval-recon", "--config", cfg_path, "--out", run) == 0
    assert run_cli("place", "--config", cfg_path, "--method", "qr", "--out", run) == 0
    assert run_cli("place", "--config", cfg_path, "--method", "dopt", "--out", run) == 0
    assert run_cli("train-policy", "--config", cfg_path, "--out", run) == 0
    assert run_cli("eval-place", "--config", cfg_path, "--out", run) == 0
    assert run_cli("report", "--csv-dir", run, "--config", cfg_path, "--out", root / "report") == 0
    return {"root": root, "cfg_path": cfg_path, "cfg": load_config(cfg_path),
            "run": run, "report": root / "report"}


def test_pipeline_artifacts(pipeline):
    run = pipeline["run"]
    for name in ("recon.ckpt", "recon.ckpt.json", "policy.ckpt", "policy.ckpt.json",
                 "train_recon.csv", "eval_recon.csv", "train_policy.csv", "eval_place.csv",
                 "mask_qr_0.25.json", "mask_qr_0.5.json", "mask_dopt_0.25.json", "mask_dopt_0.5.json"):
        assert (run / name).exists(), name
    assert (pipeline["root"] / "data" / "manifest.json").exists()
    assert (pipeline["report"] / "report.md").exists()
    assert (pipeline["report"] / "combined.csv").exists()


def test_eval_recon_grid_and_provenance(pipeline):
    cfg = pipeline["cfg"]
    rows = read_rows(pipeline["run"] / "eval_recon.csv")
    # qr/dopt/policy cells live in eval-place, so the grid covers two strategies
    assert len(rows) == 2 * len(cfg.densities) * 2
    assert {r["split"] for r in rows} == {"train", "test"}
    assert {r["strategy"] for r in rows} == {"uniform", "random"}
    assert {float(r["density"]) for r in rows} == set(cfg.densities)
    for r in rows:
        assert r["variant"] == "DTA"
        assert float(r["mse"]) > 0
        assert r["seed"] == "0"
        assert r["config_hash"] == cfg.config_hash()
        assert r["checkpoint_hash"] == storage.sha256_of_file(pipeline["run"] / "recon.ckpt")


def test_train_recon_log_columns(pipeline):
    rows = read_rows(pipeline["run"] / "train_recon.csv")
    assert set(rows[0]) == {"epoch", "split", "mse", "seed", "config_hash", "checkpoint_hash"}
    train_rows = [r for r in rows if r["split"] == "train"]
    assert len(train_rows) == 30
    assert all(np.isfinite(float(r["mse"])) for r in rows)


def test_eval_recon_rerun_is_bitwise_identical(pipeline):
    out2 = pipeline["root"] / "rerun_eval"
    assert run_cli("eval-recon", "--config", pipeline["cfg_path"], "--out", out2) == 0
    first = (pipeline["run"] / "eval_recon.csv").read_bytes()
    assert (out2 / "eval_recon.csv").read_bytes() == first


def test_train_recon_rerun_is_bitwise_identical(pipeline):
    out2 = pipeline["root"] / "rerun_train"
    assert run_cli("train-recon", "--config", pipeline["cfg_path"], "--out", out2) == 0
    assert (out2 / "recon.ckpt").read_bytes() == (pipeline["run"] / "recon.ckpt").read_bytes()
    assert (out2 / "train_recon.csv").read_bytes() == (pipeline["run"] / "train_recon.csv").read_bytes()


def test_eval_place_rerun_is_bitwise_identical(pipeline):
    out2 = pipeline["root"] / "rerun_place"
    assert run_cli("eval-place", "--config", pipeline["cfg_path"], "--out", out2) == 0
    assert (out2 / "eval_place.csv").read_bytes() == (pipeline["run"] / "eval_place.csv").read_bytes()


def test_seed_changes_the_checkpoint(pipeline):
    out2 = pipeline["root"] / "seed1"
    assert run_cli("train-recon", "--config", pipeline["cfg_path"], "--seed", 1, "--out", out2) == 0
    assert (out2 / "recon.ckpt").read_bytes() != (pipeline["run"] / "recon.ckpt").read_bytes()
    _, sidecar = storage.load_params(out2 / "recon.ckpt")
    assert sidecar["seed"] == 1
    assert sidecar["schedule"]["seed"] == 1


def test_recon_checkpoint_sidecar(pipeline):
    cfg = pipeline["cfg"]
    mapping, sidecar = storage.load_params(pipeline["run"] / "recon.ckpt")
    assert sidecar["model"] == cfg.model.to_dict()
    assert sidecar["config_hash"] == cfg.config_hash()
    assert sidecar["seed"] == 0
    assert len(mapping) > 0


def test_mask_files_cardinality_and_metadata(pipeline):
    cfg = pipeline["cfg"]
    for method in ("qr", "dopt"):
        for density in cfg.densities:
            mask, payload = storage.load_mask_json(
                pipeline["run"] / f"mask_{method}_{density}.json")
            assert mask.shape == (16,)
            assert int(mask.sum()) == cfg.cardinality(density)
            assert payload["method"] == method
            assert payload["basis_rank"] == cfg.basis_rank
            assert payload["config_hash"] == cfg.config_hash()
            assert sorted(payload["indices"]) == list(np.flatnonzero(mask))


def test_policy_checkpoint_sidecar(pipeline):
    cfg = pipeline["cfg"]
    mapping, sidecar = storage.load_params(pipeline["run"] / "policy.ckpt")
    assert sidecar["policy_net"] == cfg.policy_net.to_dict()
    assert sidecar["ppo"]["t1"] == 4 and sidecar["ppo"]["t2"] == 3
    assert sidecar["recon_checkpoint_hash"] == storage.sha256_of_file(pipeline["run"] / "recon.ckpt")
    policy_store, value_store = fp.split_actor_critic(mapping)
    assert set(policy_store.names()) == set(value_store.names())


def test_train_policy_log(pipeline):
    rows = read_rows(pipeline["run"] / "train_policy.csv")
    assert len(rows) == 7
    assert [int(r["stage"]) for r in rows] == [1] * 4 + [2] * 3
    assert rows[0]["checkpoint_hash"] == storage.sha256_of_file(pipeline["run"] / "recon.ckpt")
    assert all(float(r["mean_violation"]) == 0.0 for r in rows if r["stage"] == "2")


def test_eval_place_rows(pipeline):
    cfg = pipeline["cfg"]
    rows = read_rows(pipeline["run"] / "eval_place.csv")
    # five strategies, two held-out snapshots
    assert len(rows) == 5 * 2
    assert {r["strategy"] for r in rows} == set(cfg.strategies)
    for r in rows:
        assert float(r["density"]) == cfg.eval_density
        assert float(r["mse"]) > 0
        assert "+" in r["checkpoint_hash"]  # reconstruction and policy hashes
    qr_rows = [r for r in rows if r["strategy"] == "qr"]
    assert {int(r["mesh_index"]) for r in qr_rows} == {0, 1}


def test_report_tables(pipeline):
    text = (pipeline["report"] / "report.md").read_text()
    assert "reconstruction mse x 1e4: variant DTA, train split" in text
    assert "reconstruction mse x 1e4: variant DTA, test split" in text
    assert "| density | uniform | random |" in text
    assert "placement comparison" in text
    for strategy in pipeline["cfg"].strategies:
        assert f"| {strategy} |" in text
    assert "missing" not in text  # the small run fills every grid cell


def test_report_combined_csv(pipeline):
    rows = read_rows(pipeline["report"] / "combined.csv")
    sources = {r["source"] for r in rows}
    assert sources == {"train_recon", "eval_recon", "train_policy", "eval_place"}
    per_source = {s: len(read_rows(pipeline["run"] / f"{s}.csv")) for s in sources}
    assert len(rows) == sum(per_source.values())
    # columns missing from a source stay blank rather than shifting
    recon_row = next(r for r in rows if r["source"] == "eval_recon")
    assert recon_row["mesh_index"] == ""


def test_report_marks_missing_cells(pipeline, tmp_path):
    rows = read_rows(pipeline["run"] / "eval_recon.csv")
    kept = [r for r in rows if r["split"] == "train" and float(r["density"]) == 0.25
            and r["strategy"] == "uniform"]
    csv_dir = tmp_path / "partial"
    csv_dir.mkdir()
    with open(csv_dir / "eval_recon.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(kept)
    out = tmp_path / "report"
    assert run_cli("report", "--csv-dir", csv_dir, "--config", pipeline["cfg_path"],
                   "--out", out) == 0
    text = (out / "report.md").read_text()
    # config grid is 2 densities x 2 strategies; one cell is populated
    assert text.count("missing") == 3


def test_report_without_config_uses_observed_grid(pipeline, tmp_path):
    rows = read_rows(pipeline["run"] / "eval_recon.csv")
    kept = [r for r in rows if float(r["density"]) == 0.25 and r["strategy"] == "random"]
    csv_dir = tmp_path / "partial"
    csv_dir.mkdir()
    with open(csv_dir / "eval_recon.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(kept)
    out = tmp_path / "report"
    assert run_cli("report", "--csv-dir", csv_dir, "--out", out) == 0
    text = (out / "report.md").read_text()
    assert "| density | random |" in text
    assert "uniform" not in text
    assert "missing" not in text


def test_report_with_no_recognized_tables(tmp_path):
    csv_dir = tmp_path / "csvs"
    csv_dir.mkdir()
    (csv_dir / "stray.csv").write_text("a,b\n1,2\n")
    out = tmp_path / "report"
    assert run_cli("report", "--csv-dir", csv_dir, "--out", out) == 0
    assert "no evaluation tables" in (out / "report.md").read_text()


# ---------------------------------------------------------------------------
# failure paths and exit codes


def test_missing_config_file_exits_2(tmp_path):
    assert run_cli("eval-recon", "--config", tmp_path / "nope.json", "--out", tmp_path) == 2


def test_unreferenced_dataset_exits_2(tmp_path):
    d = base_config_dict()
    d["paths"] = {}
    cfg_path = write_config(tmp_path / "exp.json", d)
    assert run_cli("train-recon", "--config", cfg_path, "--out", tmp_path / "out") == 2


def test_missing_dataset_dir_exits_4(tmp_path):
    cfg_path = write_config(tmp_path / "exp.json", base_config_dict())
    assert run_cli("train-recon", "--config", cfg_path, "--out", tmp_path / "out") == 4


def test_missing_recon_checkpoint_exits_4(pipeline, tmp_path):
    d = base_config_dict()
    d["paths"] = {"dataset_dir": str(pipeline["root"] / "data"),
                  "recon_checkpoint": str(tmp_path / "nope.ckpt")}
    cfg_path = write_config(tmp_path / "exp.json", d)
    assert run_cli("eval-recon", "--config", cfg_path, "--out", tmp_path / "out") == 4


def test_missing_policy_checkpoint_exits_4(pipeline, tmp_path):
    d = base_config_dict()
    d["paths"] = {"dataset_dir": str(pipeline["root"] / "data"),
                  "recon_checkpoint": str(pipeline["run"] / "recon.ckpt"),
                  "policy_checkpoint": str(tmp_path / "nope.ckpt")}
    cfg_path = write_config(tmp_path / "exp.json", d)
    assert run_cli("eval-place", "--config", cfg_path, "--out", tmp_path / "out") == 4


def test_dataset_without_training_split_exits_2(tmp_path):
    d = base_config_dict()
    spec = fmesh.GeometrySpec("sphere", (1.0,), 16, 3, seed=0)
    storage.build_dataset(spec, tmp_path / "data", {"train": 1, "val": 1, "test": 0}, seed=0)
    manifest_path = tmp_path / "data" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    for entry in manifest["snapshots"]:
        entry["split"] = "val"
    manifest_path.write_text(json.dumps(manifest))
    d["paths"] = {"dataset_dir": str(tmp_path / "data")}
    cfg_path = write_config(tmp_path / "exp.json", d)
    assert run_cli("train-recon", "--config", cfg_path, "--out", tmp_path / "out") == 2


def test_eval_place_without_test_split_exits_2(pipeline, tmp_path):
    d = base_config_dict()
    d["snapshot_count"] = 2
    d["split_fractions"] = {"train": 1.0, "val": 0.0, "test": 0.0}
    d["paths"] = {"dataset_dir": str(tmp_path / "data"),
                  "recon_checkpoint": str(pipeline["run"] / "recon.ckpt"),
                  "policy_checkpoint": str(pipeline["run"] / "policy.ckpt")}
    cfg_path = write_config(tmp_path / "exp.json", d)
    assert run_cli("generate", "--config", cfg_path, "--out", tmp_path / "data") == 0
    assert run_cli("eval-place", "--config", cfg_path, "--out", tmp_path / "out") == 2


def test_divergent_training_exits_3(pipeline, tmp_path):
    d = base_config_dict()
    # adam bounds each step to about lr, so the rate must be large enough
    # that one update throws the next forward pass past float range
    d["train"]["epochs"] = 5
    d["train"]["lr_start"] = 1e80
    d["train"]["lr_end"] = 1e80
    d["paths"] = {"dataset_dir": str(pipeline["root"] / "data")}
    cfg_path = write_config(tmp_path / "exp.json", d)
    assert run_cli("train-recon", "--config", cfg_path, "--out", tmp_path / "out") == 3


def test_unknown_place_method_is_an_argparse_error(tmp_path):
    cfg_path = write_config(tmp_path / "exp.json", base_config_dict())
    with pytest.raises(SystemExit) as excinfo:
        run_cli("place", "--config", cfg_path, "--method", "greedy", "--out", tmp_path)
    assert excinfo.value.code == 2


def test_report_on_missing_csv_dir_exits_4(tmp_path):
    assert run_cli("report", "--csv-dir", tmp_path / "nope", "--out", tmp_path) == 4
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run_cli("report", "--csv-dir", empty, "--out", tmp_path) == 4


# ---------------------------------------------------------------------------
# interpolation consistency between the training log and the eval grid


def test_overfit_checkpoint_consistency(tmp_path):
    # two noiseless snapshots on a 10-node mesh; long resampled-mask training
    # drives every mask draw to interpolation, so the eval grid must agree
    # with the training log instead of collapsing to a frozen-mask fit
    d = base_config_dict()
    d["geometry"]["node_count"] = 10
    d["snapshot_count"] = 2
    d["split_fractions"] = {"train": 1.0, "val": 0.0, "test": 0.0}
    d["noise_scale"] = 0.0
    d["densities"] = [0.7]
    d["strategies"] = ["random"]
    d["eval_density"] = 0.7
    d["basis_rank"] = 2
    d["model"] = {"latent_dim": 32, "mask_latent_dim": 4, "num_layers": 2, "mlp_depth": 2}
    d["train"] = {"epochs": 16000, "batch_size": 2, "lr_start": 2e-3, "lr_end": 1e-5,
                  "densities": [0.7], "strategies": ["random"],
                  "val_density": 0.7, "val_strategy": "random"}
    cfg_path = write_config(tmp_path / "exp.json", d)
    assert run_cli("generate", "--config", cfg_path, "--out", tmp_path / "data") == 0
    assert run_cli("train-recon", "--config", cfg_path, "--out", tmp_path / "run") == 0
    assert run_cli("eval-recon", "--config", cfg_path, "--out", tmp_path / "run") == 0

    history = read_rows(tmp_path / "run" / "train_recon.csv")
    final = [r for r in history if r["split"] == "train"][-1]
    assert float(final["mse"]) < 1e-3

    rows = read_rows(tmp_path / "run" / "eval_recon.csv")
    assert len(rows) == 1  # train split only: no test snapshots
    assert rows[0]["split"] == "train"
    assert float(rows[0]["mse"]) < 1e-3
    assert rows[0]["config_hash"] == final["config_hash"]
