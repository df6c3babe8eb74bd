"""Pure-numpy implementations of the compiled kernels, used when the extension
is unavailable or disabled via FLOWSENSE_NO_EXT."""

import numpy as np


def segment_sum(values, segments, num_segments):
    """Sum rows of `values` into `out[segments[i]]`; out has num_segments rows."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    segments = np.ascontiguousarray(segments, dtype=np.int64)
    if segments.shape[0] != values.shape[0]:
        raise ValueError("segments length must match values rows")
    if segments.size:
        lo, hi = segments.min(), segments.max()
        if lo < 0 or hi >= num_segments:
            bad = lo if lo < 0 else hi
            raise IndexError(f"segment id {bad} out of range [0, {num_segments})")
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, segments, values)
    return out


def log_count_table(logq, log1mq, m):
    """Forward table T[i, j] = log P(sum of first i Bernoullis equals j), j <= m."""
    logq = np.ascontiguousarray(logq, dtype=np.float64)
    log1mq = np.ascontiguousarray(log1mq, dtype=np.float64)
    n = logq.shape[0]
    if log1mq.shape[0] != n:
        raise ValueError("logq and log1mq must have equal length")
    if m < 0:
        raise ValueError("m must be >= 0")
    table = np.full((n + 1, m + 1), -np.inf)
    table[0, 0] = 0.0
    shifted = np.empty(m + 1)
    for i in range(1, n + 1):
        prev = table[i - 1]
        shifted[0] = -np.inf
        shifted[1:] = prev[:-1]
        table[i] = np.logaddexp(prev + log1mq[i - 1], shifted + logq[i - 1])
    return table
