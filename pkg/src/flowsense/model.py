"""Reconstruction network: encoder, directional message-passing processor
with residual connections, and a per-node decoder.

The processor's distinguishing step scores each edge by the inner product
between the sender's node latent and the edge latent, then transports the
scaled latent difference through an MLP before aggregation. Ablation
variants drop the score, replace the difference by concatenation, or fall
back to plain concatenation message passing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape
from .errors import ConfigError

VARIANTS = ("DTA", "ABL_D", "ABL_DIFF", "CONVENTIONAL")


@dataclass
class ModelConfig:
    latent_dim: int = 64
    mask_latent_dim: int = 16
    num_layers: int = 6
    mlp_depth: int = 4
    variant: str = "DTA"

    def __post_init__(self):
        if self.latent_dim < 1 or self.mask_latent_dim < 1:
            raise ConfigError("latent dims must be >= 1")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.mlp_depth < 2:
            raise ConfigError("mlp_depth must be >= 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    def to_dict(self):
        return {
            "latent_dim": self.latent_dim,
            "mask_latent_dim": self.mask_latent_dim,
            "num_layers": self.num_layers,
            "mlp_depth": self.mlp_depth,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LatentGraphState:
    node_latents: ad.Tensor  # (N, latent)
    edge_latents: ad.Tensor  # (E, latent)


def _mlp_sizes(inp, hidden, out, depth):
    return [inp] + [hidden] * (depth - 1) + [out]


def _message_input_dim(config):
    if config.variant in ("DTA", "ABL_D"):
        return config.latent_dim
    if config.variant == "ABL_DIFF":
        return 2 * config.latent_dim
    return 3 * config.latent_dim


def mlp_layout(config):
    """Name -> layer size list for every MLP in the model."""
    d, h, hm = config.mlp_depth, config.latent_dim, config.mask_latent_dim
    layout = {
        "enc_mask": _mlp_sizes(1, hm, hm, d),
        "enc_node": _mlp_sizes(4 + hm, h, h, d),
        "enc_edge": _mlp_sizes(4, h, h, d),
        "dec": _mlp_sizes(h, h, 4, d),
    }
    for layer in range(config.num_layers):
        layout[f"proc{layer}.T"] = _mlp_sizes(_message_input_dim(config), h, h, d)
        layout[f"proc{layer}.S"] = _mlp_sizes(2 * h, h, h, d)
    return layout


def init_params(config, seed, out_scale=0.1):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    for prefix, sizes in mlp_layout(config).items():
        ad.init_mlp(store, prefix, sizes, rng, out_scale=out_scale)
    return store


def directional_score(vi, e):
    """Per-edge alignment score: inner product of sender latent and edge latent."""
    return ad.rowdot(vi, e)


def encode(mesh, store, config, tape):
    """Initial latent state from node fields, sensor bits, and edge geometry."""
    layout = mlp_layout(config)
    mask_col = tape.constant(mesh.mask.astype(np.float64)[:, None])
    a_emb = ad.mlp_forward(store, "enc_mask", mask_col, layout["enc_mask"])
    node_feats = ad.concat(
        [tape.constant(mesh.velocity), tape.constant(mesh.pressure[:, None]), a_emb], axis=1
    )
    v0 = ad.mlp_forward(store, "enc_node", node_feats, layout["enc_node"])
    e0 = ad.mlp_forward(store, "enc_edge", tape.constant(mesh.edge_attr), layout["enc_edge"])
    return LatentGraphState(v0, e0)


def process_layer(state, mesh, store, config, layer):
    """One processor step; residuals are added to both streams afterward."""
    layout = mlp_layout(config)
    v, e = state.node_latents, state.edge_latents
    senders = mesh.edges[:, 0]
    receivers = mesh.edges[:, 1]
    vi = ad.gather(v, senders)
    vj = ad.gather(v, receivers)
    if config.variant == "DTA":
        msg = ad.mul(directional_score(vi, e), ad.sub(vj, vi))
    elif config.variant == "ABL_D":
        msg = ad.sub(vj, vi)
    elif config.variant == "ABL_DIFF":
        msg = ad.mul(directional_score(vi, e), ad.concat([vi, vj], axis=1))
    elif config.variant == "CONVENTIONAL":
        msg = ad.concat([vi, vj, e], axis=1)
    else:
        raise ConfigError(f"unknown variant {config.variant!r}")
    e_new = ad.mlp_forward(store, f"proc{layer}.T", msg, layout[f"proc{layer}.T"])
    agg = ad.segment_sum(e_new, senders, mesh.node_count)
    v_new = ad.mlp_forward(store, f"proc{layer}.S", ad.concat([v, agg], axis=1), layout[f"proc{layer}.S"])
    return LatentGraphState(ad.add(v, v_new), ad.add(e, e_new))


def decode(state, store, config):
    layout = mlp_layout(config)
    return ad.mlp_forward(store, "dec", state.node_latents, layout["dec"])


def reconstruct(mesh, store, config, tape=None):
    """Full forward pass; returns an array, or the output tensor when a tape
    is supplied (training/gradient callers)."""
    own = tape is None
    if own:
        tape = Tape()
    state = encode(mesh, store, config, tape)
    for layer in range(config.num_layers):
        state = process_layer(state, mesh, store, config, layer)
    out = decode(state, store, config)
    return out.data if own else out


def masked_mse(pred, truth, mask):
    """Mean squared error over non-sensor nodes, all four channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask)
    missing = np.flatnonzero(mask == 0)
    if missing.size == 0:
        raise ConfigError("masked_mse needs at least one non-sensor node")
    diff = pred[missing] - truth[missing]
    return float(np.mean(diff * diff))


def masked_mse_t(pred_t, truth, mask):
    """Tape twin of masked_mse."""
    mask = np.asarray(mask)
    missing = np.flatnonzero(mask == 0)
    if missing.size == 0:
        raise ConfigError("masked_mse needs at least one non-sensor node")
    rows = ad.gather(pred_t, missing)
    target = pred_t.tape.constant(np.asarray(truth, dtype=np.float64)[missing])
    return ad.mse(rows, target)
