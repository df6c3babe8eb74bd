"""Distributions over binary masks with an exact cardinality constraint.

Covers Gumbel top-k sampling, the exact Poisson-binomial count law computed
by a log-domain DP (the reference), its saddle-point approximation (the fast
path), and the constrained mask log-probability that combines independent
Bernoulli terms with the count normalizer. Numpy implementations carry the
samplers and scoring; tape twins exist where gradients w.r.t. the inclusion
probabilities are needed.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from . import autodiff as ad
from . import kernels
from .errors import ConfigError, NumericalError

EPS_P = 1e-6
_SADDLE_TOL = 1e-10
_SADDLE_MAX_ITERS = 50
_POLISH_STEPS = 2  # trailing Newton steps keep the tape replay differentiable


@dataclass
class InclusionProbs:
    """Per-node Bernoulli inclusion parameters, clamped into (0, 1)."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 1 or q.size < 1:
            raise ConfigError("q must be a non-empty 1-D vector")
        if not np.isfinite(q).all():
            raise NumericalError("q contains non-finite entries")
        self.q = np.clip(q, EPS_P, 1.0 - EPS_P)

    @property
    def n(self):
        return self.q.size


def as_probs(q):
    if isinstance(q, InclusionProbs):
        return q
    return InclusionProbs(np.asarray(q, dtype=np.float64))


def _check_m(m, n, lo=0):
    m = int(m)
    if not lo <= m <= n:
        raise ConfigError(f"m={m} out of range [{lo}, {n}]")
    return m


def _check_mask(a, n, m):
    a = np.asarray(a)
    if a.shape != (n,):
        raise ConfigError("mask length must match q")
    if not np.isin(a, (0, 1)).all():
        raise ConfigError("mask entries must be 0 or 1")
    if int(a.sum()) != m:
        raise ConfigError(f"mask cardinality {int(a.sum())} != m={m}")
    return a.astype(np.float64)


# ---------------------------------------------------------------------------
# sampling


def gumbel_topk_sample(q, m, seed):
    """Mask of the m largest Gumbel-perturbed log-probabilities.

    Streams through a size-m min-heap, so memory and comparisons stay
    O(m) and O(n log m). Ties (measure zero) resolve to the lower index.
    """
    probs = as_probs(q)
    n = probs.n
    m = _check_m(m, n)
    if m == 0:
        return np.zeros(n, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    scores = np.log(probs.q) - np.log(-np.log(u))
    heap = []  # (score, -index): smallest surviving entry sits on top
    for i, s in enumerate(scores):
        key = (s, -i)
        if len(heap) < m:
            heapq.heappush(heap, key)
        elif key > heap[0]:
            heapq.heapreplace(heap, key)
    mask = np.zeros(n, dtype=np.uint8)
    for _, neg_i in heap:
        mask[-neg_i] = 1
    return mask


def dp_exact_sample(q, m, seed):
    """Exact draw from the cardinality-conditioned Bernoulli law.

    Backward sampling through the suffix count table: at node i with r picks
    left, take with probability q_i * P(suffix sums to r-1) / P(suffix sums to r).
    """
    probs = as_probs(q)
    n = probs.n
    m = _check_m(m, n)
    logq = np.log(probs.q)
    log1mq = np.log1p(-probs.q)
    # suffix[i, j] = log P(sum over nodes i..n-1 equals j)
    rev = kernels.log_count_table(logq[::-1], log1mq[::-1], m)
    suffix = rev[::-1]
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=np.uint8)
    remaining = m
    for i in range(n):
        if remaining == 0:
            break
        log_take = logq[i] + suffix[i + 1, remaining - 1]
        p_take = math.exp(log_take - suffix[i, remaining])
        if rng.random() < p_take:
            mask[i] = 1
            remaining -= 1
    if int(mask.sum()) != m:
        raise NumericalError("conditioned sampler failed to hit the cardinality")
    return mask


# ---------------------------------------------------------------------------
# exact count law


def dp_exact_log_prob(q, m):
    """log P(sum of independent Bernoulli(q_i) equals m), exact DP."""
    probs = as_probs(q)
    m = _check_m(m, probs.n)
    table = kernels.log_count_table(np.log(probs.q), np.log1p(-probs.q), m)
    return float(table[probs.n, m])


def dp_count_distribution(q):
    """log pmf over all counts 0..n in one table pass."""
    probs = as_probs(q)
    table = kernels.log_count_table(np.log(probs.q), np.log1p(-probs.q), probs.n)
    return table[probs.n].copy()


# ---------------------------------------------------------------------------
# saddle-point approximation

# The cumulant generating function of the count is
#   psi(t) = sum_i log(1 - q_i + q_i e^t),
# evaluated through z_i = t + logit(q_i) so large |t| cannot overflow:
#   psi(t)   = sum_i log(1 - q_i) + softplus(z_i)
#   psi'(t)  = sum_i sigmoid(z_i)
#   psi''(t) = sum_i sigmoid(z_i) (1 - sigmoid(z_i))


def _psi(qv, t):
    z = t + logit(qv)
    return float(np.sum(np.log1p(-qv)) + np.sum(np.logaddexp(z, 0.0)))


def _dpsi(qv, t):
    return float(np.sum(expit(t + logit(qv))))


def _ddpsi(qv, t):
    s = expit(t + logit(qv))
    return float(np.sum(s * (1.0 - s)))


def _initial_guess(qv, m):
    n = qv.size
    mu = float(qv.sum())
    return math.log((m / (n - m)) * ((n - mu) / mu))


def solve_saddle(q, m):
    """Root of psi'(t) = m by guarded Newton; returns (t_star, step trace).

    The trace records each applied step as ("newton", None) or
    ("bisect", t_after); the tape twin replays it verbatim. A couple of
    trailing Newton polish steps are always appended so the replayed
    iteration ends on differentiable steps.
    """
    probs = as_probs(q)
    qv = probs.q
    n = qv.size
    m = _check_m(m, n, lo=1)
    if m >= n:
        raise ConfigError("saddle solve needs interior m (1 <= m <= n-1)")
    t = _initial_guess(qv, m)
    lo, step = t, 1.0
    while _dpsi(qv, lo) >= m:
        lo -= step
        step *= 2.0
        if step > 1e12:
            raise NumericalError("failed to bracket the saddle point from below")
    hi, step = t, 1.0
    while _dpsi(qv, hi) <= m:
        hi += step
        step *= 2.0
        if step > 1e12:
            raise NumericalError("failed to bracket the saddle point from above")
    trace = []
    for _ in range(_SADDLE_MAX_ITERS):
        d1 = _dpsi(qv, t)
        if d1 < m:
            lo = t
        else:
            hi = t
        if abs(d1 - m) < _SADDLE_TOL:
            break
        t_new = t - (d1 - m) / _ddpsi(qv, t)
        if lo < t_new < hi:
            trace.append(("newton", None))
        else:
            t_new = 0.5 * (lo + hi)
            trace.append(("bisect", t_new))
        t = t_new
    else:
        raise NumericalError("saddle-point Newton did not converge")
    for _ in range(_POLISH_STEPS):
        t = t - (_dpsi(qv, t) - m) / _ddpsi(qv, t)
        trace.append(("newton", None))
    if abs(_dpsi(qv, t) - m) >= _SADDLE_TOL:
        raise NumericalError("saddle-point polish left a large residual")
    return t, trace


def saddle_root(q, m):
    return solve_saddle(q, m)[0]


def saddlepoint_log_prob(q, m):
    """Saddle-point approximation of log P(sum = m); exact at the endpoints."""
    probs = as_probs(q)
    qv = probs.q
    n = probs.n
    m = _check_m(m, n)
    if m == 0:
        return float(np.sum(np.log1p(-qv)))
    if m == n:
        return float(np.sum(np.log(qv)))
    t, _ = solve_saddle(probs, m)
    d2 = _ddpsi(qv, t)
    if d2 <= 0:
        raise NumericalError("psi'' must be positive at the saddle")
    return _psi(qv, t) - m * t - 0.5 * math.log(2.0 * math.pi * d2)


def _saddle_log_prob_t(q_t, m, trace):
    """Tape replay of the converged Newton iteration, then the density formula."""
    tape = q_t.tape
    n = q_t.data.shape[0]
    one_minus = ad.sub(tape.constant(np.ones(n)), q_t)
    logq = ad.log(q_t)
    log1mq = ad.log(one_minus)
    lgt = ad.sub(logq, log1mq)
    mu = ad.tsum(q_t)
    ratio = ad.div(ad.sub(tape.constant(np.float64(n)), mu), mu)
    t = ad.log(ad.mul(tape.constant(np.float64(m / (n - m))), ratio))
    for kind, value in trace:
        if kind == "bisect":
            t = tape.constant(np.float64(value))
        else:
            sig = ad.sigmoid(ad.add(t, lgt))
            d1 = ad.tsum(sig)
            d2 = ad.tsum(ad.mul(sig, ad.sub(tape.constant(np.ones(n)), sig)))
            t = ad.sub(t, ad.div(ad.sub(d1, tape.constant(np.float64(m))), d2))
    z = ad.add(t, lgt)
    sig = ad.sigmoid(z)
    d2 = ad.tsum(ad.mul(sig, ad.sub(tape.constant(np.ones(n)), sig)))
    psi = ad.add(ad.tsum(log1mq), ad.tsum(ad.softplus(z)))
    half_log = ad.mul(ad.log(ad.mul(d2, 2.0 * math.pi)), 0.5)
    return ad.sub(ad.sub(psi, ad.mul(t, float(m))), half_log)


# ---------------------------------------------------------------------------
# constrained log-probability


def independent_log_prob(a, q):
    """Sum of unconstrained Bernoulli log-probabilities for mask a."""
    probs = as_probs(q)
    a = np.asarray(a, dtype=np.float64)
    if a.shape != probs.q.shape:
        raise ConfigError("mask length must match q")
    return float(np.sum(a * np.log(probs.q) + (1.0 - a) * np.log1p(-probs.q)))


def constrained_log_prob(a, q, m, mode="saddlepoint"):
    """log pi(a | sum a = m): Bernoulli terms minus the count log-probability."""
    probs = as_probs(q)
    m = _check_m(m, probs.n)
    a = _check_mask(a, probs.n, m)
    if mode == "exact_dp":
        denom = dp_exact_log_prob(probs, m)
    elif mode == "saddlepoint":
        denom = saddlepoint_log_prob(probs, m)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return independent_log_prob(a, probs) - denom


def clamp_probs_t(q_t):
    """Tape-side clamp matching the InclusionProbs range."""
    return ad.clip(q_t, EPS_P, 1.0 - EPS_P)


def independent_log_prob_t(a, q_t):
    tape = q_t.tape
    a = np.asarray(a, dtype=np.float64)
    n = q_t.data.shape[0]
    one_minus = ad.sub(tape.constant(np.ones(n)), q_t)
    terms = ad.add(
        ad.mul(tape.constant(a), ad.log(q_t)),
        ad.mul(tape.constant(1.0 - a), ad.log(one_minus)),
    )
    return ad.tsum(terms)


def _dp_log_prob_t(q_t, m):
    """Exact count log-probability on tape; O(n) vector recursions."""
    tape = q_t.tape
    n = q_t.data.shape[0]
    neg = -1e30  # finite stand-in for log(0); keeps the tape NaN-free
    one_minus = ad.sub(tape.constant(np.ones(n)), q_t)
    logq = ad.log(q_t)
    log1mq = ad.log(one_minus)
    init = np.full(m + 1, neg)
    init[0] = 0.0
    row = tape.constant(init)
    for i in range(n):
        lq = ad.gather(logq, np.array([i]))
        l1 = ad.gather(log1mq, np.array([i]))
        stay = ad.add(row, l1)
        take = ad.add(ad.shift_right(row, neg), lq)
        row = ad.logaddexp(stay, take)
    return ad.gather(row, np.array([m]))


def constrained_log_prob_t(a, q_t, m, mode="saddlepoint"):
    """Tape twin of constrained_log_prob; differentiable w.r.t. q_t."""
    n = q_t.data.shape[0]
    m = _check_m(m, n)
    a = _check_mask(a, n, m)
    q_t = clamp_probs_t(q_t)
    num = independent_log_prob_t(a, q_t)
    if m == 0:
        one_minus = ad.sub(q_t.tape.constant(np.ones(n)), q_t)
        denom = ad.tsum(ad.log(one_minus))
    elif m == n:
        denom = ad.tsum(ad.log(q_t))
    elif mode == "exact_dp":
        denom = ad.tsum(_dp_log_prob_t(q_t, m))  # tsum flattens the length-1 gather
    elif mode == "saddlepoint":
        _, trace = solve_saddle(q_t.data, m)
        denom = _saddle_log_prob_t(q_t, m, trace)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return ad.sub(num, denom)


# ---------------------------------------------------------------------------
# penalized reward


def penalized_reward(reward, a, m_target, lam):
    """Soft-cardinality reward: R - lam * (m_target - sum a)^2."""
    if lam <= 0:
        raise ConfigError("lam must be > 0")
    a = np.asarray(a)
    violation = float(m_target) - float(a.sum())
    return float(reward) - float(lam) * violation * violation


# ---------------------------------------------------------------------------
# diagnostics


def saddle_error_study(sizes, n_draws, seed, csv_path=None):
    """Mean relative error of the saddle-point probability vs the exact DP.

    Draws q uniformly, uses m = ceil(0.3 n), and optionally dumps one row
    per draw (n, draw, m, t_star, exact and approximate log-probs, error).
    """
    rng = np.random.default_rng(seed)
    rows = []
    means = {}
    for n in sizes:
        m = math.ceil(0.3 * n)
        errs = []
        for draw in range(n_draws):
            q = InclusionProbs(rng.random(n))
            exact = dp_exact_log_prob(q, m)
            approx = saddlepoint_log_prob(q, m)
            t_star = saddle_root(q, m)
            rel = abs(math.exp(approx) - math.exp(exact)) / math.exp(exact)
            errs.append(rel)
            rows.append((n, draw, m, t_star, exact, approx, rel))
        means[n] = float(np.mean(errs))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["n", "draw", "m", "t_star", "log_prob_exact", "log_prob_saddle", "rel_error"])
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return means
