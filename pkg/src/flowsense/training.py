"""Reconstruction training: mask resampling per snapshot per epoch, merged
mini-batches over disjoint graph unions, Adam with a cosine learning-rate
schedule, and evaluation sweeps over density/strategy grids."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mesh as fmesh
from . import model as fmodel
from .autodiff import Tape
from .errors import ConfigError, NumericalError

_STRATEGIES = ("random", "uniform")


@dataclass
class TrainSchedule:
    epochs: int = 100
    batch_size: int = 16
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    densities: tuple = (0.05, 0.10, 0.20, 0.30)
    strategies: tuple = ("random",)
    val_density: float = 0.10
    val_strategy: str = "random"
    # capacity-debug switch: draw masks/fills once per snapshot and reuse
    resample_masks: bool = True
    seed: int = 0

    def __post_init__(self):
        self.densities = tuple(float(d) for d in self.densities)
        self.strategies = tuple(self.strategies)
        self.resample_masks = bool(self.resample_masks)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ConfigError("learning rates must be >= 0")
        if not self.densities or any(not 0 < d <= 1 for d in self.densities):
            raise ConfigError("densities must lie in (0, 1]")
        if not self.strategies or any(s not in _STRATEGIES for s in self.strategies):
            raise ConfigError(f"strategies must come from {_STRATEGIES}")
        if not 0 < self.val_density <= 1:
            raise ConfigError("val_density must lie in (0, 1]")
        if self.val_strategy not in _STRATEGIES:
            raise ConfigError(f"val_strategy must come from {_STRATEGIES}")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "densities": list(self.densities),
            "strategies": list(self.strategies),
            "val_density": self.val_density,
            "val_strategy": self.val_strategy,
            "resample_masks": self.resample_masks,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def cosine_lr(schedule, epoch):
    if schedule.epochs == 1:
        return schedule.lr_start
    frac = epoch / (schedule.epochs - 1)
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + np.cos(np.pi * frac))


def merge_meshes(meshes):
    """Disjoint union with node offsets; message passing never crosses parts."""
    if not meshes:
        raise ConfigError("cannot merge an empty mesh list")
    if len(meshes) == 1:
        return meshes[0]
    offsets = np.cumsum([0] + [m.node_count for m in meshes[:-1]])
    return fmesh.MeshGraph(
        node_count=int(sum(m.node_count for m in meshes)),
        positions=np.concatenate([m.positions for m in meshes]),
        velocity=np.concatenate([m.velocity for m in meshes]),
        pressure=np.concatenate([m.pressure for m in meshes]),
        mask=np.concatenate([m.mask for m in meshes]),
        edges=np.concatenate([m.edges + off for m, off in zip(meshes, offsets)]),
        edge_attr=np.concatenate([m.edge_attr for m in meshes]),
        validate=False,
    )


def _mask_one(mesh, schedule, rng):
    density = schedule.densities[rng.integers(len(schedule.densities))]
    strategy = schedule.strategies[rng.integers(len(schedule.strategies))]
    mask = fmesh.make_mask(mesh, density, strategy, seed=int(rng.integers(2**63 - 1)))
    return fmesh.apply_mask(mesh, mask, fill_seed=int(rng.integers(2**63 - 1)))


def _masked_batch(meshes, schedule, rng, frozen=None):
    """Fresh mask per snapshot (or the frozen one), merged with truth channels."""
    if frozen is None:
        masked = [_mask_one(m, schedule, rng) for m in meshes]
    else:
        masked = [frozen[id(m)] for m in meshes]
    merged = merge_meshes(masked)
    truth = np.concatenate([fmesh.field_channels(m) for m in meshes])
    return merged, truth


def _epoch_metric(total_sq, total_rows):
    return total_sq / (4.0 * total_rows)


def train_reconstruction(
    train_meshes,
    val_meshes,
    config,
    schedule,
    store=None,
    csv_path=None,
    extra_columns=None,
):
    """Minimize the masked reconstruction error; returns (store, history).

    history rows are dicts with epoch/split/mse; the same rows go to csv_path
    when given, with extra_columns appended verbatim to every row.
    """
    if not train_meshes:
        raise ConfigError("training requires at least one snapshot")
    if store is None:
        store = fmodel.init_params(config, seed=schedule.seed)
    rng = np.random.default_rng(schedule.seed)

    # fixed validation masks so the curve is comparable across epochs
    val_masked = []
    val_rng = np.random.default_rng(schedule.seed + 1)
    for m in val_meshes:
        mask = fmesh.make_mask(m, schedule.val_density, schedule.val_strategy, seed=int(val_rng.integers(2**63 - 1)))
        val_masked.append((fmesh.apply_mask(m, mask, fill_seed=int(val_rng.integers(2**63 - 1))), fmesh.field_channels(m)))

    frozen = None
    if not schedule.resample_masks:
        frozen = {id(m): _mask_one(m, schedule, rng) for m in train_meshes}

    history = []
    for epoch in range(schedule.epochs):
        lr = cosine_lr(schedule, epoch)
        order = rng.permutation(len(train_meshes))
        total_sq = 0.0
        total_rows = 0
        for start in range(0, len(order), schedule.batch_size):
            chunk = [train_meshes[i] for i in order[start : start + schedule.batch_size]]
            merged, truth = _masked_batch(chunk, schedule, rng, frozen)
            try:
                tape = Tape()
                pred = fmodel.reconstruct(merged, store, config, tape)
                loss = fmodel.masked_mse_t(pred, truth, merged.mask)
                store.zero_grads()
                tape.backward(loss)
                ad.adam_step(store, lr)
            except NumericalError as err:
                raise NumericalError(
                    f"training diverged at epoch {epoch}, batch {start // schedule.batch_size}: {err}"
                ) from err
            rows = int(np.sum(merged.mask == 0))
            total_sq += float(loss.data) * 4.0 * rows
            total_rows += rows
        history.append({"epoch": epoch, "split": "train", "mse": _epoch_metric(total_sq, total_rows)})
        if val_masked:
            v_sq = 0.0
            v_rows = 0
            for masked, truth in val_masked:
                pred = fmodel.reconstruct(masked, store, config)
                rows = int(np.sum(masked.mask == 0))
                v_sq += fmodel.masked_mse(pred, truth, masked.mask) * 4.0 * rows
                v_rows += rows
            history.append({"epoch": epoch, "split": "val", "mse": _epoch_metric(v_sq, v_rows)})

    if csv_path is not None:
        write_metrics_csv(csv_path, history, extra_columns)
    return store, history


def write_metrics_csv(path, rows, extra_columns=None):
    """CSV with repr-formatted floats so reruns are bitwise identical."""
    if not rows:
        raise ConfigError("no rows to write")
    extra = dict(extra_columns or {})
    fields = list(rows[0].keys()) + list(extra.keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            merged = {**row, **extra}
            writer.writerow([_format_cell(merged[k]) for k in fields])


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def evaluate_reconstruction(meshes, store, config, density, strategy, seed):
    """Mean masked MSE over snapshots at one (density, strategy) cell."""
    if not meshes:
        raise ConfigError("evaluation requires at least one snapshot")
    rng = np.random.default_rng(seed)
    total_sq = 0.0
    total_rows = 0
    for m in meshes:
        mask = fmesh.make_mask(m, density, strategy, seed=int(rng.integers(2**63 - 1)))
        masked = fmesh.apply_mask(m, mask, fill_seed=int(rng.integers(2**63 - 1)))
        pred = fmodel.reconstruct(masked, store, config)
        rows = int(np.sum(masked.mask == 0))
        total_sq += fmodel.masked_mse(pred, fmesh.field_channels(m), masked.mask) * 4.0 * rows
        total_rows += rows
    return _epoch_metric(total_sq, total_rows)


def evaluation_sweep(meshes, store, config, densities, strategies, seed):
    """Long-format rows over the density x strategy grid."""
    rows = []
    for density in densities:
        for strategy in strategies:
            mse = evaluate_reconstruction(meshes, store, config, density, strategy, seed)
            rows.append({"density": density, "strategy": strategy, "mse": mse})
    return rows
