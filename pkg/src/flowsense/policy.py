"""Sensor-placement policy learned with a two-stage clipped policy gradient.

The policy and value networks are message-passing nets over the full true
fields (no sensor channel: the policy decides where sensors go, so it cannot
condition on them). Each rollout is a single decision: emit per-node inclusion
probabilities, draw one mask, score it by frozen-reconstruction error. Stage
one explores with independent Bernoulli draws under a soft cardinality
penalty; stage two switches to exact-cardinality top-k sampling, with the
count-conditioned log-probability supplied by the saddle-point estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mesh as fmesh
from . import model as fmodel
from . import subset
from .autodiff import ParamStore, Tape
from .errors import ConfigError, NumericalError
from .training import merge_meshes

REWARD_FLOOR = -10.0  # stands in for the reconstruction call on degenerate masks
_ADV_EPS = 1e-8

_ESTIMATORS = ("saddlepoint", "exact_dp")


@dataclass
class PolicyConfig:
    """Backbone shape shared by the policy and value networks."""

    latent_dim: int = 128
    num_layers: int = 6
    mlp_depth: int = 2
    variant: str = "DTA"

    def __post_init__(self):
        self.backbone_config()  # ModelConfig validates the shared fields

    def backbone_config(self):
        return fmodel.ModelConfig(
            latent_dim=self.latent_dim,
            mask_latent_dim=1,
            num_layers=self.num_layers,
            mlp_depth=self.mlp_depth,
            variant=self.variant,
        )

    def to_dict(self):
        return {
            "latent_dim": self.latent_dim,
            "num_layers": self.num_layers,
            "mlp_depth": self.mlp_depth,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def net_layout(config):
    """Name -> layer sizes for one placement net (policy or value)."""
    d, h = config.mlp_depth, config.latent_dim
    backbone = fmodel.mlp_layout(config.backbone_config())
    layout = {
        "enc_node": fmodel._mlp_sizes(4, h, h, d),
        "enc_edge": fmodel._mlp_sizes(4, h, h, d),
        "head": fmodel._mlp_sizes(h, h, 1, d),
    }
    for layer in range(config.num_layers):
        layout[f"proc{layer}.T"] = backbone[f"proc{layer}.T"]
        layout[f"proc{layer}.S"] = backbone[f"proc{layer}.S"]
    return layout


def init_net_params(config, seed, out_scale=0.1):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    for prefix, sizes in net_layout(config).items():
        ad.init_mlp(store, prefix, sizes, rng, out_scale=out_scale)
    return store


def init_actor_critic(config, seed):
    """Fresh policy and value stores; the nets share shape, not parameters."""
    return init_net_params(config, seed), init_net_params(config, seed + 1)


def node_scores(mesh, store, config, tape):
    """Per-node scalar head output, shape (N,). Shared by both nets."""
    layout = net_layout(config)
    feats = tape.constant(fmesh.field_channels(mesh))
    v0 = ad.mlp_forward(store, "enc_node", feats, layout["enc_node"])
    e0 = ad.mlp_forward(store, "enc_edge", tape.constant(mesh.edge_attr), layout["enc_edge"])
    state = fmodel.LatentGraphState(v0, e0)
    backbone = config.backbone_config()
    for layer in range(config.num_layers):
        state = fmodel.process_layer(state, mesh, store, backbone, layer)
    out = ad.mlp_forward(store, "head", state.node_latents, layout["head"])
    return ad.reshape(out, (mesh.node_count,))


def inclusion_probs_t(mesh, store, config, tape):
    """Clamped sigmoid of the policy head, shape (N,)."""
    return subset.clamp_probs_t(ad.sigmoid(node_scores(mesh, store, config, tape)))


def inclusion_probs(mesh, store, config):
    return subset.InclusionProbs(inclusion_probs_t(mesh, store, config, Tape()).data)


def graph_value_t(mesh, store, config, tape):
    """Scalar state value: mean of the per-node head outputs."""
    return ad.tmean(node_scores(mesh, store, config, tape))


def graph_value(mesh, store, config):
    return float(graph_value_t(mesh, store, config, Tape()).data)


# ---------------------------------------------------------------------------
# rewards


def make_reconstructor(store, config):
    """Frozen reconstruction closure: masked mesh -> (N, 4) prediction."""

    def predict(masked):
        return fmodel.reconstruct(masked, store, config)

    return predict


def reward(mesh, mask, predict_fn, fill_seed):
    """Negative reconstruction error of the placement under the frozen model."""
    mask = np.asarray(mask)
    if mask.shape != (mesh.node_count,):
        raise ConfigError("mask length must equal node_count")
    if mask.min() >= 1:
        raise ConfigError("reward needs at least one non-sensor node")
    masked = fmesh.apply_mask(mesh, mask, fill_seed)
    pred = predict_fn(masked)
    return -fmodel.masked_mse(pred, fmesh.field_channels(mesh), mask)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    """One iteration's single-step rollouts, everything the update needs."""

    mode: str  # "penalized" | "constrained"
    graphs: list
    masks: list
    m_targets: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray  # stage objective: penalized in stage one, plain after
    advantages: np.ndarray
    violations: np.ndarray  # |sum a - m_target| per rollout
    estimator: str = "saddlepoint"

    def __post_init__(self):
        if self.mode not in ("penalized", "constrained"):
            raise ConfigError(f"unknown rollout mode {self.mode!r}")
        if self.estimator not in _ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        self.m_targets = np.asarray(self.m_targets, dtype=np.int64)
        self.old_log_probs = np.asarray(self.old_log_probs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        self.violations = np.asarray(self.violations, dtype=np.float64)
        b = len(self.graphs)
        if b < 1:
            raise ConfigError("a rollout batch needs at least one rollout")
        for arr in (self.m_targets, self.old_log_probs, self.rewards, self.advantages, self.violations):
            if arr.shape != (b,):
                raise ConfigError("rollout arrays must have one entry per graph")
        if len(self.masks) != b:
            raise ConfigError("rollout arrays must have one entry per graph")

    @property
    def size(self):
        return len(self.graphs)


def _rollout_slices(graphs):
    sizes = [g.node_count for g in graphs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return [np.arange(offsets[i], offsets[i + 1]) for i in range(len(graphs))]


def _m_target_list(graphs, m_targets):
    ms = np.broadcast_to(np.asarray(m_targets, dtype=np.int64), (len(graphs),)).copy()
    for g, m in zip(graphs, ms):
        if not 1 <= m <= g.node_count - 1:
            raise ConfigError(f"m_target {m} must leave both sensors and gaps on {g.node_count} nodes")
    return ms


def _batch_forward(graphs, policy_store, value_store, config):
    """Inclusion probabilities and state values for every rollout graph.

    One merged forward per net; slicing the disjoint union back apart is
    exact because messages never cross component boundaries.
    """
    merged = merge_meshes(graphs)
    slices = _rollout_slices(graphs)
    q_all = inclusion_probs_t(merged, policy_store, config, Tape()).data
    s_all = node_scores(merged, value_store, config, Tape()).data
    qs = [q_all[idx] for idx in slices]
    values = np.array([float(s_all[idx].mean()) for idx in slices])
    return qs, values


def collect_penalized(policy_store, value_store, config, graphs, predict_fn, m_targets, lam, seed):
    """Stage-one rollouts: independent Bernoulli masks, soft-cardinality reward.

    Degenerate masks (all sensors or none) skip the reconstructor and take
    the reward floor; the fill seed is still drawn so the stream position
    does not depend on the sample.
    """
    ms = _m_target_list(graphs, m_targets)
    qs, values = _batch_forward(graphs, policy_store, value_store, config)
    rng = np.random.default_rng(seed)
    masks, old_lp, rewards, violations = [], [], [], []
    for g, q, m in zip(graphs, qs, ms):
        a = (rng.random(g.node_count) < q).astype(np.uint8)
        fill_seed = int(rng.integers(2**63 - 1))
        s = int(a.sum())
        if 0 < s < g.node_count:
            r = reward(g, a, predict_fn, fill_seed)
        else:
            r = REWARD_FLOOR
        masks.append(a)
        old_lp.append(subset.independent_log_prob(a, q))
        rewards.append(subset.penalized_reward(r, a, m, lam))
        violations.append(abs(s - int(m)))
    rewards = np.array(rewards)
    return RolloutBatch(
        mode="penalized",
        graphs=list(graphs),
        masks=masks,
        m_targets=ms,
        old_log_probs=np.array(old_lp),
        rewards=rewards,
        advantages=rewards - values,
        violations=np.array(violations, dtype=np.float64),
    )


def collect_constrained(policy_store, value_store, config, graphs, predict_fn, m_targets, seed, estimator="saddlepoint"):
    """Stage-two rollouts: exact-cardinality masks, count-conditioned log-probs."""
    if estimator not in _ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}")
    ms = _m_target_list(graphs, m_targets)
    qs, values = _batch_forward(graphs, policy_store, value_store, config)
    rng = np.random.default_rng(seed)
    masks, old_lp, rewards = [], [], []
    for g, q, m in zip(graphs, qs, ms):
        a = subset.gumbel_topk_sample(q, int(m), seed=int(rng.integers(2**63 - 1)))
        fill_seed = int(rng.integers(2**63 - 1))
        masks.append(a)
        old_lp.append(subset.constrained_log_prob(a, q, int(m), mode=estimator))
        rewards.append(reward(g, a, predict_fn, fill_seed))
    rewards = np.array(rewards)
    return RolloutBatch(
        mode="constrained",
        graphs=list(graphs),
        masks=masks,
        m_targets=ms,
        old_log_probs=np.array(old_lp),
        rewards=rewards,
        advantages=rewards - values,
        violations=np.abs(np.array([m.sum() for m in masks], dtype=np.float64) - ms),
        estimator=estimator,
    )


# ---------------------------------------------------------------------------
# clipped update


def normalized_advantages(batch):
    a = batch.advantages
    return (a - a.mean()) / (a.std() + _ADV_EPS)


def clipped_surrogate_t(ratio_t, advantage, clip_eps):
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A) for one rollout."""
    tape = ratio_t.tape
    a = tape.constant(np.asarray(float(advantage)))
    plain = ad.mul(ratio_t, a)
    clipped = ad.mul(ad.clip(ratio_t, 1.0 - clip_eps, 1.0 + clip_eps), a)
    return ad.minimum(plain, clipped)


def _rollout_log_prob_t(batch, i, q_t):
    if batch.mode == "penalized":
        return subset.independent_log_prob_t(batch.masks[i], q_t)
    return subset.constrained_log_prob_t(batch.masks[i], q_t, int(batch.m_targets[i]), mode=batch.estimator)


def surrogate_objective_t(policy_store, config, batch, advantages, clip_eps, tape, merged=None, slices=None):
    """(negated mean surrogate, ratio array) on the given tape."""
    if merged is None:
        merged = merge_meshes(batch.graphs)
        slices = _rollout_slices(batch.graphs)
    q_all = inclusion_probs_t(merged, policy_store, config, tape)
    total = None
    ratios = np.empty(batch.size)
    for i, idx in enumerate(slices):
        q_t = ad.gather(q_all, idx)
        logp = _rollout_log_prob_t(batch, i, q_t)
        ratio = ad.exp(ad.sub(logp, tape.constant(np.asarray(batch.old_log_probs[i]))))
        ratios[i] = float(ratio.data)
        surr = clipped_surrogate_t(ratio, advantages[i], clip_eps)
        total = surr if total is None else ad.add(total, surr)
    loss = ad.mul(total, tape.constant(np.asarray(-1.0 / batch.size)))
    return loss, ratios


def value_objective_t(value_store, config, batch, tape, merged=None, slices=None):
    """Mean squared error of graph values against the batch rewards."""
    if merged is None:
        merged = merge_meshes(batch.graphs)
        slices = _rollout_slices(batch.graphs)
    s_all = node_scores(merged, value_store, config, tape)
    total = None
    for i, idx in enumerate(slices):
        v = ad.tmean(ad.gather(s_all, idx))
        d = ad.sub(v, tape.constant(np.asarray(batch.rewards[i])))
        sq = ad.mul(d, d)
        total = sq if total is None else ad.add(total, sq)
    return ad.mul(total, tape.constant(np.asarray(1.0 / batch.size)))


def ppo_update(policy_store, value_store, config, batch, clip_eps=0.2, grad_steps=5, lr=1e-5):
    """A few Adam steps on the clipped surrogate plus the value regression.

    Advantages are normalized once per batch. Non-finite ratios abort with
    the failing step in the message rather than silently poisoning Adam.
    """
    if not 0.0 < clip_eps < 1.0:
        raise ConfigError("clip_eps must lie in (0, 1)")
    if grad_steps < 1:
        raise ConfigError("grad_steps must be >= 1")
    if lr < 0:
        raise ConfigError("lr must be >= 0")
    adv = normalized_advantages(batch)
    merged = merge_meshes(batch.graphs)
    slices = _rollout_slices(batch.graphs)
    policy_loss = value_loss = 0.0
    ratios = np.ones(batch.size)
    for step in range(grad_steps):
        tape = Tape()
        try:
            p_loss, ratios = surrogate_objective_t(
                policy_store, config, batch, adv, clip_eps, tape, merged, slices
            )
            v_loss = value_objective_t(value_store, config, batch, tape, merged, slices)
            total = ad.add(p_loss, v_loss)
            policy_store.zero_grads()
            value_store.zero_grads()
            tape.backward(total)
        except NumericalError as err:
            raise NumericalError(f"policy update aborted at gradient step {step}: {err}") from err
        ad.adam_step(policy_store, lr)
        ad.adam_step(value_store, lr)
        policy_loss = float(p_loss.data)
        value_loss = float(v_loss.data)
    return {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        # ratios from the last step; at the first they are identically one
        "clip_fraction": float(np.mean(np.abs(ratios - 1.0) > clip_eps)),
    }


# ---------------------------------------------------------------------------
# two-stage schedule


@dataclass
class PPOSchedule:
    t1: int = 3000
    t2: int = 1000
    rollouts: int = 32
    density: float = 0.10
    lam: float = 0.00015
    clip_eps: float = 0.2
    grad_steps: int = 5
    lr_start: float = 1e-5
    lr_end: float = 1e-7
    estimator: str = "saddlepoint"
    seed: int = 0

    def __post_init__(self):
        if self.t1 < 0 or self.t2 < 0 or self.t1 + self.t2 < 1:
            raise ConfigError("stage lengths must be >= 0 and sum to >= 1")
        if self.rollouts < 1:
            raise ConfigError("rollouts must be >= 1")
        if not 0.0 < self.density < 1.0:
            raise ConfigError("density must lie in (0, 1); the policy must leave gaps")
        if self.lam <= 0:
            raise ConfigError("lam must be > 0")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.grad_steps < 1:
            raise ConfigError("grad_steps must be >= 1")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.estimator not in _ESTIMATORS:
            raise ConfigError(f"estimator must come from {_ESTIMATORS}")

    @property
    def total_iters(self):
        return self.t1 + self.t2

    def to_dict(self):
        return {
            "t1": self.t1,
            "t2": self.t2,
            "rollouts": self.rollouts,
            "density": self.density,
            "lam": self.lam,
            "clip_eps": self.clip_eps,
            "grad_steps": self.grad_steps,
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "estimator": self.estimator,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def ppo_lr(schedule, iteration):
    if schedule.total_iters == 1:
        return schedule.lr_start
    frac = iteration / (schedule.total_iters - 1)
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + np.cos(np.pi * frac))


def train_two_step(graphs, predict_fn, config, schedule, csv_path=None, extra_columns=None):
    """Penalized exploration for t1 iterations, then constrained fine-tuning.

    Both stages update the same parameters; only the sampler and the
    log-probability estimator switch. Returns the trained stores and one
    log row per iteration.
    """
    if not graphs:
        raise ConfigError("training requires at least one graph")
    for g in graphs:
        m = fmesh.mask_cardinality(schedule.density, g.node_count)
        if not 1 <= m <= g.node_count - 1:
            raise ConfigError(f"density {schedule.density} gives unusable cardinality {m} on {g.node_count} nodes")
    policy_store, value_store = init_actor_critic(config, schedule.seed)
    rng = np.random.default_rng(schedule.seed + 2)
    rows = []
    for t in range(schedule.total_iters):
        stage = 1 if t < schedule.t1 else 2
        lr = ppo_lr(schedule, t)
        picks = rng.integers(len(graphs), size=schedule.rollouts)
        batch_graphs = [graphs[int(i)] for i in picks]
        ms = [fmesh.mask_cardinality(schedule.density, g.node_count) for g in batch_graphs]
        cseed = int(rng.integers(2**63 - 1))
        if stage == 1:
            batch = collect_penalized(
                policy_store, value_store, config, batch_graphs, predict_fn, ms, schedule.lam, cseed
            )
        else:
            batch = collect_constrained(
                policy_store, value_store, config, batch_graphs, predict_fn, ms, cseed,
                estimator=schedule.estimator,
            )
        stats = ppo_update(
            policy_store, value_store, config, batch,
            clip_eps=schedule.clip_eps, grad_steps=schedule.grad_steps, lr=lr,
        )
        rows.append({
            "iteration": t,
            "stage": stage,
            "mean_reward": float(batch.rewards.mean()),
            "mean_violation": float(batch.violations.mean()),
            "value_loss": stats["value_loss"],
            "clip_fraction": stats["clip_fraction"],
        })
    if csv_path is not None:
        from .training import write_metrics_csv

        write_metrics_csv(csv_path, rows, extra_columns)
    return policy_store, value_store, rows


def sample_placement(mesh, policy_store, config, density, seed):
    """Inference-time mask: always the exact-cardinality top-k sampler."""
    m = fmesh.mask_cardinality(density, mesh.node_count)
    if not 1 <= m <= mesh.node_count - 1:
        raise ConfigError(f"density {density} gives unusable cardinality {m} on {mesh.node_count} nodes")
    q = inclusion_probs(mesh, policy_store, config)
    return subset.gumbel_topk_sample(q, m, seed)


def evaluate_placement(meshes, policy_store, config, density, predict_fn, seed):
    """Per-mesh reconstruction MSE under sampled policy placements."""
    if not meshes:
        raise ConfigError("evaluation requires at least one mesh")
    rng = np.random.default_rng(seed)
    mses = []
    for g in meshes:
        a = sample_placement(g, policy_store, config, density, int(rng.integers(2**63 - 1)))
        mses.append(-reward(g, a, predict_fn, int(rng.integers(2**63 - 1))))
    return np.array(mses)


# ---------------------------------------------------------------------------
# checkpointing: both stores in one file, names prefixed by role


def merge_actor_critic(policy_store, value_store):
    merged = ParamStore()
    for name in policy_store.names():
        merged.add(f"pi.{name}", policy_store.value(name))
    for name in value_store.names():
        merged.add(f"vf.{name}", value_store.value(name))
    return merged


def split_actor_critic(mapping):
    """Inverse of merge_actor_critic, from a flat name -> array mapping."""
    policy_store, value_store = ParamStore(), ParamStore()
    for name, value in mapping.items():
        if name.startswith("pi."):
            policy_store.add(name[3:], value)
        elif name.startswith("vf."):
            value_store.add(name[3:], value)
        else:
            raise ConfigError(f"unexpected parameter {name!r} in policy checkpoint")
    if not policy_store.names() or not value_store.names():
        raise ConfigError("policy checkpoint is missing a role prefix")
    return policy_store, value_store
