"""Interpolation baselines (mean, inverse-square-distance KNN) and classical
sensor placement (QR column pivoting, greedy D-optimality) on a truncated
snapshot basis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .mesh import field_channels

_EPS_DOPT = 1e-9
_COINCIDENT = 1e-12


def mean_impute(mesh):
    """Non-sensor nodes get the per-channel mean of the sensor nodes."""
    sensors = np.flatnonzero(mesh.mask == 1)
    if sensors.size == 0:
        raise ConfigError("mean_impute needs at least one sensor")
    channels = field_channels(mesh)
    pred = channels.copy()
    pred[mesh.mask == 0] = channels[sensors].mean(axis=0)
    return pred


def knn_impute(mesh, k):
    """Inverse-square-distance average of the k nearest sensors per node."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    sensors = np.flatnonzero(mesh.mask == 1)
    if sensors.size == 0:
        raise ConfigError("knn_impute needs at least one sensor")
    k = min(k, sensors.size)
    channels = field_channels(mesh)
    pred = channels.copy()
    missing = np.flatnonzero(mesh.mask == 0)
    if missing.size == 0:
        return pred
    diff = mesh.positions[missing, None, :] - mesh.positions[None, sensors, :]
    dist = np.maximum(np.linalg.norm(diff, axis=2), _COINCIDENT)
    nearest = np.argsort(dist, axis=1)[:, :k]
    rows = np.arange(missing.size)[:, None]
    w = 1.0 / dist[rows, nearest] ** 2
    w /= w.sum(axis=1, keepdims=True)
    pred[missing] = np.einsum("ik,ikc->ic", w, channels[sensors[nearest]])
    return pred


@dataclass
class SnapshotBasis:
    """Truncated left-singular basis of flattened (node-major) snapshots."""

    basis: np.ndarray  # (4 * node_count, r)
    singular_values: np.ndarray  # (r,), non-increasing
    node_count: int

    def __post_init__(self):
        self.basis = np.ascontiguousarray(self.basis, dtype=np.float64)
        self.singular_values = np.ascontiguousarray(self.singular_values, dtype=np.float64)
        rows, r = self.basis.shape
        if rows != 4 * self.node_count:
            raise ConfigError("basis row count must be 4 * node_count")
        if self.singular_values.shape != (r,):
            raise ConfigError("one singular value per mode")
        if r > min(self.basis.shape):
            raise ConfigError("rank exceeds matrix dimensions")
        if np.any(np.diff(self.singular_values) > 0):
            raise ConfigError("singular values must be non-increasing")
        gram = self.basis.T @ self.basis
        if np.max(np.abs(gram - np.eye(r))) > 1e-8:
            raise ConfigError("basis columns must be orthonormal")

    @property
    def rank(self):
        return self.basis.shape[1]

    def node_block(self, i):
        return self.basis[4 * i : 4 * (i + 1)]


def build_basis(meshes, r):
    """SVD of the snapshot matrix (snapshots as columns); r clamped to rank."""
    if not meshes:
        raise ConfigError("build_basis needs at least one snapshot")
    if r < 1:
        raise ConfigError("r must be >= 1")
    snap = np.column_stack([field_channels(m).ravel() for m in meshes])
    u, s, _ = np.linalg.svd(snap, full_matrices=False)
    tol = max(snap.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if r > rank:
        warnings.warn(f"requested {r} modes but snapshot rank is {rank}; clamping")
        r = max(rank, 1)
    return SnapshotBasis(u[:, :r], s[:r], meshes[0].node_count)


def _mask_from_indices(indices, n):
    mask = np.zeros(n, dtype=np.uint8)
    mask[np.asarray(indices, dtype=np.int64)] = 1
    return mask


def qr_pivot_placement(basis, m):
    """Block column-pivoted QR on the basis transpose.

    Each node owns a 4-column block of Phi^T; steps pick the block with the
    largest residual Frobenius norm (lowest index on ties), then deflate the
    picked block's column span.
    """
    n = basis.node_count
    _check_m_nodes(m, n)
    resid = basis.basis.T.copy()  # (r, 4n)
    chosen = []
    scale = max(np.linalg.norm(resid[:, 4 * i : 4 * (i + 1)]) for i in range(n))
    for _ in range(m):
        scores = np.array([np.linalg.norm(resid[:, 4 * i : 4 * (i + 1)]) for i in range(n)])
        # deflation leaves roundoff dust; snap it so exhausted blocks tie at
        # zero and the lowest index wins
        scores[scores < 1e-10 * scale] = 0.0
        for i in chosen:
            scores[i] = -np.inf
        best = int(np.argmax(scores))  # argmax takes the first of equals
        chosen.append(best)
        block = resid[:, 4 * best : 4 * (best + 1)]
        q = _orth(block)
        if q.shape[1]:
            resid -= q @ (q.T @ resid)
    return _mask_from_indices(chosen, n)


def _orth(block, tol=1e-12):
    u, s, _ = np.linalg.svd(block, full_matrices=False)
    return u[:, s > tol * (s[0] if s.size and s[0] > 0 else 1.0)]


def d_optimal_objective(basis, indices):
    """log det of the epsilon-regularized r x r information matrix.

    Equivalent (via the determinant identity det(AB + eI) ~ det(BA + eI) up
    to a candidate-independent epsilon power) to the measured-Gram form, but
    monotone under adding sensors.
    """
    info = _EPS_DOPT * np.eye(basis.rank)
    for i in indices:
        block = basis.node_block(i)
        info = info + block.T @ block
    sign, logdet = np.linalg.slogdet(info)
    if sign <= 0:
        raise ConfigError("information matrix must be positive definite")
    return float(logdet)


def d_optimal_placement(basis, m):
    """Greedy D-optimal selection, one node per step, lowest-index ties."""
    n = basis.node_count
    _check_m_nodes(m, n)
    chosen = []
    info = _EPS_DOPT * np.eye(basis.rank)
    for _ in range(m):
        best, best_val = -1, -np.inf
        for i in range(n):
            if i in chosen:
                continue
            block = basis.node_block(i)
            sign, logdet = np.linalg.slogdet(info + block.T @ block)
            if sign <= 0:
                continue
            if logdet > best_val:
                best, best_val = i, logdet
        if best < 0:
            raise ConfigError("no candidate improves the information matrix")
        chosen.append(best)
        block = basis.node_block(best)
        info = info + block.T @ block
    return _mask_from_indices(chosen, n)


def _check_m_nodes(m, n):
    if m < 1:
        raise ConfigError("m must be >= 1")
    if m > n:
        raise ConfigError(f"cannot place {m} sensors on {n} nodes")
