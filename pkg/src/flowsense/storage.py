"""Binary snapshot/checkpoint containers, dataset manifests, and hashing.

Snapshot files ("FRG1") and parameter files ("FRP1") are little-endian,
self-describing, and round-trip bitwise. A JSON sidecar next to each
snapshot carries the geometry spec and, when known, the field stats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingArtifactError
from .mesh import FieldStats, GeometrySpec, MeshGraph, synthesize_field

SNAP_MAGIC = b"FRG1"
PARAM_MAGIC = b"FRP1"
VERSION = 1


def save_snapshot(path, mesh, spec=None, stats=None):
    path = Path(path)
    n, e = mesh.node_count, mesh.edge_count
    with open(path, "wb") as f:
        f.write(SNAP_MAGIC)
        f.write(struct.pack("<III", VERSION, n, e))
        f.write(np.ascontiguousarray(mesh.positions, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(mesh.velocity, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(mesh.pressure, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(mesh.mask, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(mesh.edges, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(mesh.edge_attr, dtype="<f8").tobytes())
    sidecar = {}
    if spec is not None:
        sidecar["geometry"] = spec.to_dict()
    if stats is not None:
        sidecar["stats"] = stats.to_dict()
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def load_snapshot(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"snapshot not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != SNAP_MAGIC:
        raise ConfigError(f"{path} is not a snapshot file")
    version, n, e = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported snapshot version {version}")
    off = 16

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()  # aligned and owned; frombuffer views can be neither

    positions = take(3 * n, "<f8").reshape(n, 3)
    velocity = take(3 * n, "<f8").reshape(n, 3)
    pressure = take(n, "<f8")
    mask = take(n, np.uint8)
    edges = take(2 * e, "<u4").reshape(e, 2).astype(np.int64)
    edge_attr = take(4 * e, "<f8").reshape(e, 4)
    mesh = MeshGraph(n, positions, velocity, pressure, mask, edges, edge_attr)
    spec = stats = None
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())
        if "geometry" in sidecar:
            spec = GeometrySpec.from_dict(sidecar["geometry"])
        if "stats" in sidecar:
            stats = FieldStats.from_dict(sidecar["stats"])
    return mesh, spec, stats


def save_params(path, store, extra=None):
    """Named-tensor container; an optional JSON sidecar carries model config."""
    names = sorted(store.names())
    with open(path, "wb") as f:
        f.write(PARAM_MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            blob = name.encode("utf-8")
            value = store.value(name)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    if extra is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(extra, f, indent=1, sort_keys=True)


def load_params(path):
    """Returns (name -> array mapping, sidecar dict or None)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != PARAM_MAGIC:
        raise ConfigError(f"{path} is not a parameter file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += arr.nbytes
        out[name] = arr.copy()
    sidecar = None
    sidecar_path = Path(str(path) + ".json")
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())
    return out, sidecar


def sha256_of_file(path, digits=12):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()[:digits]


def sha256_of_json(obj, digits=12):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:digits]


# ---------------------------------------------------------------------------
# datasets


def build_dataset(spec, out_dir, counts, seed, noise_scale=0.05):
    """Generate one mesh and a set of independent snapshots on it.

    counts: dict with train/val/test snapshot counts. Phases t are uniform
    on [0, 2pi); per-snapshot noise seeds derive from the master seed.
    Returns the manifest dict.
    """
    from .mesh import generate_mesh

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = generate_mesh(spec)
    master = np.random.default_rng(seed)
    entries = []
    train_meshes = []
    total = sum(counts.values())
    phases = master.uniform(0.0, 2.0 * np.pi, size=total)
    noise_seeds = master.integers(0, 2**63 - 1, size=total)
    i = 0
    for split in ("train", "val", "test"):
        for _ in range(counts.get(split, 0)):
            snap = synthesize_field(mesh, phases[i], int(noise_seeds[i]), noise_scale)
            fname = f"snap_{i:05d}.frg"
            save_snapshot(out_dir / fname, snap, spec=spec)
            entries.append(
                {"file": fname, "split": split, "t": float(phases[i]), "seed": int(noise_seeds[i])}
            )
            if split == "train":
                train_meshes.append(snap)
            i += 1
    stats = FieldStats.from_meshes(train_meshes)
    manifest = {
        "geometry": spec.to_dict(),
        "noise_scale": float(noise_scale),
        "seed": int(seed),
        "stats": stats.to_dict(),
        "snapshots": entries,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_dataset(dataset_dir):
    """Load every snapshot listed in the manifest, grouped by split."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no dataset manifest in {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())
    splits = {"train": [], "val": [], "test": []}
    for entry in manifest["snapshots"]:
        mesh, _, _ = load_snapshot(dataset_dir / entry["file"])
        splits[entry["split"]].append(mesh)
    stats = FieldStats.from_dict(manifest["stats"])
    return splits, stats, manifest


def save_mask_json(path, mask, extra=None):
    """Sensor mask as sorted node indices plus density metadata."""
    mask = np.asarray(mask)
    indices = np.flatnonzero(mask == 1)
    payload = {
        "indices": [int(i) for i in indices],
        "node_count": int(mask.shape[0]),
        "density": float(indices.size / mask.shape[0]),
    }
    payload.update(extra or {})
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    return payload


def load_mask_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no mask file at {path}")
    payload = json.loads(path.read_text())
    mask = np.zeros(int(payload["node_count"]), dtype=np.uint8)
    mask[np.asarray(payload["indices"], dtype=np.int64)] = 1
    return mask, payload
