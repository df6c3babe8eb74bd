"""Mesh graphs on parametric surfaces and desk-scale synthetic flow snapshots.

Node positions come from a seeded low-discrepancy sequence mapped onto the
surface, connectivity is a symmetric k-nearest-neighbor graph forced to a
single component, and fields follow a Taylor-Green style analytic solution
with a seeded position-dependent noise term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .errors import ConfigError

KINDS = ("sphere", "ellipsoid", "cylinder")
_PARAM_COUNT = {"sphere": 1, "ellipsoid": 3, "cylinder": 2}
CHANNELS = ("u_x", "u_y", "u_z", "p")


@dataclass
class GeometrySpec:
    kind: str
    shape_params: tuple
    node_count: int
    knn_degree: int
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown geometry kind {self.kind!r}")
        self.shape_params = tuple(float(p) for p in np.atleast_1d(self.shape_params))
        if len(self.shape_params) != _PARAM_COUNT[self.kind]:
            raise ConfigError(
                f"{self.kind} expects {_PARAM_COUNT[self.kind]} shape params, "
                f"got {len(self.shape_params)}"
            )
        if any(p <= 0 for p in self.shape_params):
            raise ConfigError("shape_params must be strictly positive")
        if self.knn_degree < 3:
            raise ConfigError("knn_degree must be >= 3")
        if self.node_count < self.knn_degree + 1:
            raise ConfigError("node_count must be >= knn_degree + 1")

    def to_dict(self):
        return {
            "kind": self.kind,
            "shape_params": list(self.shape_params),
            "node_count": int(self.node_count),
            "knn_degree": int(self.knn_degree),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["shape_params"]), d["node_count"], d["knn_degree"], d["seed"])


@dataclass
class FieldStats:
    """Per-channel mean and strictly positive std (u_x, u_y, u_z, p)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (4,) or self.std.shape != (4,):
            raise ConfigError("FieldStats wants 4 channels")
        if not np.all(self.std > 0):
            raise ConfigError("channel std must be strictly positive")

    @classmethod
    def from_meshes(cls, meshes):
        """Statistics over a training split; rejects constant channels."""
        if not meshes:
            raise ConfigError("no meshes to compute stats from")
        stacked = np.concatenate([field_channels(m) for m in meshes], axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


@dataclass
class MeshGraph:
    """Immutable graph snapshot: geometry, fields, sensor mask, directed edges."""

    node_count: int
    positions: np.ndarray  # (N, 3)
    velocity: np.ndarray  # (N, 3)
    pressure: np.ndarray  # (N,)
    mask: np.ndarray  # (N,) uint8
    edges: np.ndarray  # (E, 2) int64, both directions present
    edge_attr: np.ndarray  # (E, 4): displacement x_j - x_i and its norm
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        n = self.node_count
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.velocity = np.ascontiguousarray(self.velocity, dtype=np.float64)
        self.pressure = np.ascontiguousarray(self.pressure, dtype=np.float64)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64)
        self.edge_attr = np.ascontiguousarray(self.edge_attr, dtype=np.float64)
        if self.validate:
            if self.positions.shape != (n, 3) or self.velocity.shape != (n, 3):
                raise ConfigError("positions/velocity must have shape (N, 3)")
            if self.pressure.shape != (n,) or self.mask.shape != (n,):
                raise ConfigError("pressure/mask must have shape (N,)")
            if self.edges.ndim != 2 or self.edges.shape[1] != 2:
                raise ConfigError("edges must have shape (E, 2)")
            if self.edge_attr.shape != (self.edges.shape[0], 4):
                raise ConfigError("edge_attr must have shape (E, 4)")
            if self.edges.size:
                if self.edges.min() < 0 or self.edges.max() >= n:
                    raise ConfigError("edge endpoint out of range")
                seen = set(map(tuple, self.edges))
                if len(seen) != self.edges.shape[0]:
                    raise ConfigError("duplicate edges")
                if any((j, i) not in seen for i, j in seen):
                    raise ConfigError("edge set is not symmetric")
            if not np.isin(self.mask, (0, 1)).all():
                raise ConfigError("mask entries must be 0 or 1")
            norms = np.linalg.norm(self.edge_attr[:, :3], axis=1)
            if self.edges.size and np.max(np.abs(norms - self.edge_attr[:, 3])) > 1e-12:
                raise ConfigError("edge_attr norm inconsistent with displacement")
        for arr in (self.positions, self.velocity, self.pressure, self.mask, self.edges, self.edge_attr):
            arr.flags.writeable = False

    @property
    def edge_count(self):
        return self.edges.shape[0]


def field_channels(mesh):
    """(N, 4) stack of velocity and pressure."""
    return np.column_stack([mesh.velocity, mesh.pressure])


def _with_channels(mesh, channels, mask=None):
    return replace(
        mesh,
        velocity=channels[:, :3].copy(),
        pressure=channels[:, 3].copy(),
        mask=mesh.mask if mask is None else mask,
        validate=False,
    )


def _surface_points(spec):
    sampler = qmc.Halton(d=2, scramble=True, seed=spec.seed)
    uv = sampler.random(spec.node_count)
    theta = 2.0 * np.pi * uv[:, 0]
    if spec.kind == "sphere":
        (radius,) = spec.shape_params
        z = radius * (2.0 * uv[:, 1] - 1.0)
        rho = np.sqrt(np.maximum(radius**2 - z**2, 0.0))
        return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    if spec.kind == "ellipsoid":
        a, b, c = spec.shape_params
        z = 2.0 * uv[:, 1] - 1.0
        rho = np.sqrt(np.maximum(1.0 - z**2, 0.0))
        return np.column_stack([a * rho * np.cos(theta), b * rho * np.sin(theta), c * z])
    radius, height = spec.shape_params
    z = height * (uv[:, 1] - 0.5)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])


def _component_labels(n, pairs):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    if not pairs:
        return np.arange(n)
    arr = np.array(sorted(pairs))
    adj = coo_matrix((np.ones(len(arr)), (arr[:, 0], arr[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def generate_mesh(spec):
    """Quasi-uniform surface nodes, symmetric KNN edges, forced connectivity."""
    positions = _surface_points(spec)
    n = spec.node_count
    tree = cKDTree(positions)
    _, nbrs = tree.query(positions, k=spec.knn_degree + 1)
    pairs = set()
    for i in range(n):
        for j in nbrs[i]:
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    # join components through their nearest cross pair until one remains
    while True:
        labels = _component_labels(n, pairs)
        if labels.max() == 0:
            break
        in_main = labels == labels[0]
        a_idx = np.flatnonzero(in_main)
        b_idx = np.flatnonzero(~in_main)
        diffs = positions[a_idx][:, None, :] - positions[b_idx][None, :, :]
        d2 = np.einsum("abk,abk->ab", diffs, diffs)
        ai, bi = np.unravel_index(np.argmin(d2), d2.shape)
        i, j = int(a_idx[ai]), int(b_idx[bi])
        pairs.add((min(i, j), max(i, j)))
    directed = sorted(pairs | {(j, i) for i, j in pairs})
    edges = np.array(directed, dtype=np.int64).reshape(-1, 2)
    disp = positions[edges[:, 1]] - positions[edges[:, 0]]
    edge_attr = np.column_stack([disp, np.linalg.norm(disp, axis=1)])
    return MeshGraph(
        node_count=n,
        positions=positions,
        velocity=np.zeros((n, 3)),
        pressure=np.zeros(n),
        mask=np.zeros(n, dtype=np.uint8),
        edges=edges,
        edge_attr=edge_attr,
    )


def synthesize_field(mesh, t, seed, noise_scale=0.05):
    """Analytic velocity/pressure at phase t plus seeded position-scaled noise."""
    if noise_scale < 0:
        raise ConfigError("noise_scale must be >= 0")
    if not np.isfinite(mesh.positions).all():
        raise ConfigError("mesh positions must be finite")
    x, y, z = mesh.positions.T
    k = np.pi
    # two vortex modes with phase-modulated weights; a single-mode field would
    # collapse reconstruction to one amplitude estimate and flatten the
    # density response
    a1 = 1.0 + 0.5 * np.sin(t)
    a2 = 0.7 * np.cos(t)
    u = a1 * np.sin(k * x) * np.cos(k * y) * np.cos(k * z) + a2 * np.sin(k * y) * np.cos(k * z) * np.cos(k * x)
    v = -a1 * np.cos(k * x) * np.sin(k * y) * np.cos(k * z) - a2 * np.cos(k * y) * np.sin(k * z) * np.cos(k * x)
    w = 0.5 * a1 * np.sin(k * z) * np.cos(k * (x + y)) + 0.5 * a2 * np.sin(k * x) * np.cos(k * (y + z))
    p = (a1**2 / 16.0) * (np.cos(2 * k * x) + np.cos(2 * k * y)) * (np.cos(2 * k * z) + 2.0) + (
        a2**2 / 16.0
    ) * (np.cos(2 * k * y) + np.cos(2 * k * z)) * (np.cos(2 * k * x) + 2.0)
    channels = np.column_stack([u, v, w, p])
    if noise_scale > 0:
        rng = np.random.default_rng(seed)
        h = 1.0 + np.linalg.norm(mesh.positions, axis=1)
        channels = channels + noise_scale * h[:, None] * rng.standard_normal((mesh.node_count, 4))
    return _with_channels(mesh, channels)


def make_mask(mesh, density, strategy, seed):
    """Exactly round(density * N) sensors, placed at random or by farthest-point."""
    if not 0.0 < density <= 1.0:
        raise ConfigError("density must be in (0, 1]")
    n = mesh.node_count
    m = int(round(density * n))
    if m < 1:
        raise ConfigError(f"density {density} rounds to zero sensors on {n} nodes")
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=np.uint8)
    if strategy == "random":
        mask[rng.choice(n, size=m, replace=False)] = 1
    elif strategy == "uniform":
        # farthest-point sampling from a seeded start node
        start = int(rng.integers(n))
        chosen = [start]
        dmin = np.linalg.norm(mesh.positions - mesh.positions[start], axis=1)
        for _ in range(m - 1):
            nxt = int(np.argmax(dmin))
            chosen.append(nxt)
            dmin = np.minimum(dmin, np.linalg.norm(mesh.positions - mesh.positions[nxt], axis=1))
        mask[chosen] = 1
    else:
        raise ConfigError(f"unknown mask strategy {strategy!r}")
    return mask


def apply_mask(mesh, mask, fill_seed):
    """Keep true fields where mask is 1; seeded standard-normal fill elsewhere.

    Meant for meshes already in normalized units, so the placeholders match
    the field scale.
    """
    mask = np.asarray(mask)
    if mask.shape != (mesh.node_count,):
        raise ConfigError("mask length must equal node_count")
    if not np.isin(mask, (0, 1)).all():
        raise ConfigError("mask entries must be 0 or 1")
    mask = mask.astype(np.uint8)
    rng = np.random.default_rng(fill_seed)
    channels = field_channels(mesh).copy()
    missing = np.flatnonzero(mask == 0)
    channels[missing] = rng.standard_normal((missing.size, 4))
    return _with_channels(mesh, channels, mask=mask)


def normalize(mesh, stats):
    """Per-channel z-score of velocity and pressure."""
    return _with_channels(mesh, (field_channels(mesh) - stats.mean) / stats.std)


def denormalize(mesh, stats):
    return _with_channels(mesh, field_channels(mesh) * stats.std + stats.mean)


def mask_cardinality(density, node_count):
    return int(round(density * node_count))
