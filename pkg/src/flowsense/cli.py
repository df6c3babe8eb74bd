"""Command-line entry points.

Each verb is an independent process: generate, train-recon, eval-recon,
place, train-policy, eval-place, report. Every metrics CSV row carries
(seed, config_hash, checkpoint_hash); reruns with identical config and seed
reproduce outputs bitwise, so nothing here writes timestamps.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines as fb
from . import mesh as fmesh
from . import model as fmodel
from . import policy as fp
from . import storage
from .autodiff import ParamStore
from .config import load_config
from .errors import ConfigError, FlowsenseError, MissingArtifactError
from .training import evaluate_reconstruction, train_reconstruction, write_metrics_csv

_SEED_CAP = 2**63 - 1


def _store_from_mapping(mapping):
    store = ParamStore()
    for name, value in mapping.items():
        store.add(name, value)
    return store


def _require(path, what):
    if path is None:
        raise ConfigError(f"config does not reference a {what}")
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found: {path}")
    return Path(path)


def _load_normalized(config):
    dataset_dir = _require(config.path("dataset_dir"), "dataset directory")
    splits, stats, manifest = storage.load_dataset(dataset_dir)
    if not splits["train"]:
        raise ConfigError(f"dataset {dataset_dir} has no training snapshots")
    norm = {k: [fmesh.normalize(m, stats) for m in v] for k, v in splits.items()}
    return norm, stats, manifest


def _load_recon(config):
    ckpt = _require(config.path("recon_checkpoint"), "reconstruction checkpoint")
    mapping, sidecar = storage.load_params(ckpt)
    if not sidecar or "model" not in sidecar:
        raise ConfigError(f"checkpoint {ckpt} has no model sidecar")
    model_config = fmodel.ModelConfig.from_dict(sidecar["model"])
    return _store_from_mapping(mapping), model_config, storage.sha256_of_file(ckpt)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_generate(config, seed, out):
    counts = config.split_counts()
    storage.build_dataset(config.geometry, out, counts, seed=seed, noise_scale=config.noise_scale)
    print(f"dataset written to {out} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_train_recon(config, seed, out):
    norm, _, _ = _load_normalized(config)
    schedule = replace(config.train, seed=seed)
    store, history = train_reconstruction(norm["train"], norm["val"], config.model, schedule)
    ckpt = out / "recon.ckpt"
    storage.save_params(
        ckpt, store,
        extra={"model": config.model.to_dict(), "schedule": schedule.to_dict(),
               "seed": seed, "config_hash": config.config_hash()},
    )
    write_metrics_csv(
        out / "train_recon.csv", history,
        extra_columns={"seed": seed, "config_hash": config.config_hash(),
                       "checkpoint_hash": storage.sha256_of_file(ckpt)},
    )
    final = [r for r in history if r["split"] == "train"][-1]
    print(f"checkpoint {ckpt} (final train mse {final['mse']:.3e})")
    return 0


def cmd_eval_recon(config, seed, out):
    norm, _, _ = _load_normalized(config)
    store, model_config, ckpt_hash = _load_recon(config)
    rng = np.random.default_rng(seed)
    rows = []
    # qr/dopt/policy cells belong to eval-place; the report marks them missing
    strategies = [s for s in config.strategies if s in ("uniform", "random")]
    for split in ("train", "test"):
        for density in config.densities:
            for strategy in strategies:
                cell_seed = int(rng.integers(_SEED_CAP))
                if not norm[split]:
                    continue
                mse = evaluate_reconstruction(norm[split], store, model_config, density, strategy, cell_seed)
                rows.append({
                    "split": split, "density": density, "strategy": strategy,
                    "variant": model_config.variant, "mse": mse,
                })
    if not rows:
        raise ConfigError("nothing to evaluate: dataset splits are empty")
    write_metrics_csv(
        out / "eval_recon.csv", rows,
        extra_columns={"seed": seed, "config_hash": config.config_hash(), "checkpoint_hash": ckpt_hash},
    )
    print(f"wrote {out / 'eval_recon.csv'} ({len(rows)} cells)")
    return 0


def cmd_place(config, seed, out, method):
    norm, _, _ = _load_normalized(config)
    basis = fb.build_basis(norm["train"], config.basis_rank)
    placer = {"qr": fb.qr_pivot_placement, "dopt": fb.d_optimal_placement}[method]
    written = []
    for density in config.densities:
        m = config.cardinality(density)
        mask = placer(basis, m)
        path = out / f"mask_{method}_{density}.json"
        storage.save_mask_json(
            path, mask,
            extra={"method": method, "basis_rank": basis.rank, "seed": seed,
                   "config_hash": config.config_hash()},
        )
        written.append(path)
    print(f"wrote {len(written)} mask files to {out}")
    return 0


def cmd_train_policy(config, seed, out):
    norm, _, _ = _load_normalized(config)
    recon_store, recon_config, recon_hash = _load_recon(config)
    predict = fp.make_reconstructor(recon_store, recon_config)
    schedule = replace(config.ppo, seed=seed)
    policy_store, value_store, rows = fp.train_two_step(norm["train"], predict, config.policy_net, schedule)
    ckpt = out / "policy.ckpt"
    storage.save_params(
        ckpt, fp.merge_actor_critic(policy_store, value_store),
        extra={"policy_net": config.policy_net.to_dict(), "ppo": schedule.to_dict(),
               "seed": seed, "config_hash": config.config_hash(), "recon_checkpoint_hash": recon_hash},
    )
    write_metrics_csv(
        out / "train_policy.csv", rows,
        extra_columns={"seed": seed, "config_hash": config.config_hash(), "checkpoint_hash": recon_hash},
    )
    print(f"checkpoint {ckpt} (final mean reward {rows[-1]['mean_reward']:.3e})")
    return 0


def _load_policy(config):
    ckpt = _require(config.path("policy_checkpoint"), "policy checkpoint")
    mapping, sidecar = storage.load_params(ckpt)
    if not sidecar or "policy_net" not in sidecar:
        raise ConfigError(f"checkpoint {ckpt} has no policy sidecar")
    policy_store, _ = fp.split_actor_critic(mapping)
    return policy_store, fp.PolicyConfig.from_dict(sidecar["policy_net"]), storage.sha256_of_file(ckpt)


def cmd_eval_place(config, seed, out):
    norm, _, _ = _load_normalized(config)
    recon_store, recon_config, recon_hash = _load_recon(config)
    predict = fp.make_reconstructor(recon_store, recon_config)
    test = norm["test"]
    if not test:
        raise ConfigError("dataset has no test snapshots")
    density = config.eval_density
    ckpt_hash = recon_hash
    policy_store = policy_config = None
    if "policy" in config.strategies:
        policy_store, policy_config, policy_hash = _load_policy(config)
        ckpt_hash = f"{recon_hash}+{policy_hash}"
    fixed_masks = {}
    for method, placer in (("qr", fb.qr_pivot_placement), ("dopt", fb.d_optimal_placement)):
        if method in config.strategies:
            basis = fb.build_basis(norm["train"], config.basis_rank)
            fixed_masks[method] = placer(basis, config.cardinality(density))
    rng = np.random.default_rng(seed)
    rows = []
    for strategy in config.strategies:
        for i, mesh in enumerate(test):
            mask_seed = int(rng.integers(_SEED_CAP))
            fill_seed = int(rng.integers(_SEED_CAP))
            if strategy in ("uniform", "random"):
                mask = fmesh.make_mask(mesh, density, strategy, mask_seed)
            elif strategy in fixed_masks:
                mask = fixed_masks[strategy]
            else:
                mask = fp.sample_placement(mesh, policy_store, policy_config, density, mask_seed)
            mse = -fp.reward(mesh, mask, predict, fill_seed)
            rows.append({"strategy": strategy, "mesh_index": i, "density": density, "mse": mse})
    write_metrics_csv(
        out / "eval_place.csv", rows,
        extra_columns={"seed": seed, "config_hash": config.config_hash(), "checkpoint_hash": ckpt_hash},
    )
    print(f"wrote {out / 'eval_place.csv'} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# report


def _read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt_scaled(mse):
    # reports quote mse * 1e4, matching the usual table convention
    return f"{float(mse) * 1e4:.4f}"


def _recon_table(rows, densities, strategies):
    lines = []
    by_cell = {}
    for r in rows:
        by_cell.setdefault((r["split"], r["variant"]), {})[(float(r["density"]), r["strategy"])] = r["mse"]
    for (split, variant), cells in sorted(by_cell.items()):
        lines.append(f"### reconstruction mse x 1e4: variant {variant}, {split} split")
        lines.append("")
        lines.append("| density | " + " | ".join(strategies) + " |")
        lines.append("|---" * (len(strategies) + 1) + "|")
        for d in densities:
            row = [f"| {d} "]
            for s in strategies:
                val = cells.get((d, s))
                row.append(f"| {_fmt_scaled(val)} " if val is not None else "| missing ")
            lines.append("".join(row) + "|")
        lines.append("")
    return lines


def _place_table(rows):
    by_strategy = {}
    for r in rows:
        by_strategy.setdefault(r["strategy"], []).append(float(r["mse"]))
    lines = [
        "### placement comparison, mse x 1e4",
        "",
        "| strategy | mean | snapshots |",
        "|---|---|---|",
    ]
    for strategy, mses in sorted(by_strategy.items()):
        lines.append(f"| {strategy} | {_fmt_scaled(np.mean(mses))} | {len(mses)} |")
    lines.append("")
    return lines


def cmd_report(csv_dir, out, config=None):
    csv_dir = Path(csv_dir)
    if not csv_dir.is_dir():
        raise MissingArtifactError(f"csv directory not found: {csv_dir}")
    paths = sorted(csv_dir.glob("*.csv"))
    if not paths:
        raise MissingArtifactError(f"no CSV files in {csv_dir}")
    sources = {p.stem: _read_csv_rows(p) for p in paths}

    all_fields, combined = [], []
    for stem, rows in sources.items():
        for row in rows:
            for k in row:
                if k not in all_fields:
                    all_fields.append(k)
            combined.append({**row, "source": stem})
    with open(out / "combined.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["source"] + all_fields
        writer.writerow(header)
        for row in combined:
            writer.writerow([row.get(k, "") for k in header])

    recon_rows = [r for rows in sources.values() for r in rows if "variant" in r and "density" in r]
    place_rows = [r for rows in sources.values() for r in rows if "mesh_index" in r]
    if config is not None:
        densities = list(config.densities)
        strategies = [s for s in config.strategies if s in ("uniform", "random")]
    else:
        densities = sorted({float(r["density"]) for r in recon_rows})
        strategies = sorted({r["strategy"] for r in recon_rows})
    lines = ["# experiment report", ""]
    if recon_rows and strategies:
        lines += _recon_table(recon_rows, densities, strategies)
    if place_rows:
        lines += _place_table(place_rows)
    if len(lines) == 2:
        lines.append("no evaluation tables found in the CSV directory")
        lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    print(f"wrote {out / 'report.md'} and {out / 'combined.csv'}")
    return 0


# ---------------------------------------------------------------------------
# dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowsense",
        description="Flow reconstruction from sparse sensors and learned sensor placement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=0, help="run seed (overrides schedule seeds)")
        p.add_argument("--out", required=True, help="output directory")

    add_common(sub.add_parser("generate", help="synthesize a snapshot dataset"))
    add_common(sub.add_parser("train-recon", help="train the reconstruction model"))
    add_common(sub.add_parser("eval-recon", help="masked-MSE grid over densities and strategies"))
    p_place = sub.add_parser("place", help="classical sensor placement from a snapshot basis")
    add_common(p_place)
    p_place.add_argument("--method", required=True, choices=["qr", "dopt"])
    add_common(sub.add_parser("train-policy", help="train the placement policy"))
    add_common(sub.add_parser("eval-place", help="compare placement strategies at one density"))
    p_report = sub.add_parser("report", help="aggregate CSVs into tables and plot data")
    p_report.add_argument("--csv-dir", required=True, help="directory of metrics CSVs")
    p_report.add_argument("--config", help="optional config fixing the report grid")
    add_common(p_report, with_config=False)
    return parser


def _dispatch(args):
    if args.command == "report":
        cfg = load_config(args.config) if args.config else None
        return cmd_report(args.csv_dir, _out_dir(args), cfg)
    cfg = load_config(args.config)
    out = _out_dir(args)
    if args.command == "generate":
        return cmd_generate(cfg, args.seed, out)
    if args.command == "train-recon":
        return cmd_train_recon(cfg, args.seed, out)
    if args.command == "eval-recon":
        return cmd_eval_recon(cfg, args.seed, out)
    if args.command == "place":
        return cmd_place(cfg, args.seed, out, args.method)
    if args.command == "train-policy":
        return cmd_train_policy(cfg, args.seed, out)
    if args.command == "eval-place":
        return cmd_eval_place(cfg, args.seed, out)
    raise ConfigError(f"unknown command {args.command!r}")  # pragma: no cover


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except FlowsenseError as err:
        print(f"error: {err}", file=sys.stderr)
        return getattr(err, "exit_code", 2)


if __name__ == "__main__":
    sys.exit(main())
