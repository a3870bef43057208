"""Counter-based Brownian increments.

Channel c (0 = common noise, i >= 1 = idiosyncratic noise of agent i) owns one
Philox stream keyed by (seed, c). Path p occupies a fixed window of that
stream, so the increment at (seed, path, node, channel) never depends on how
many paths, agents or chunks a run uses.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_INV53 = 2.0 ** -53


def channel_key(seed: int, channel: int) -> np.ndarray:
    return np.random.SeedSequence([int(seed), int(channel)]).generate_state(2, np.uint64)


def _blocks_per_path(steps: int, dim: int) -> int:
    # Philox emits four 64-bit words per counter increment
    return -(-(steps * dim) // 4)


def standard_normals(seed: int, channel: int, start: int, stop: int, steps: int, dim: int) -> np.ndarray:
    """Standard normals for paths [start, stop), shape (stop-start, steps, dim)."""
    count = stop - start
    if count <= 0:
        return np.empty((0, steps, dim))
    blocks = _blocks_per_path(steps, dim)
    bg = np.random.Philox(key=channel_key(seed, channel))
    if start:
        bg.advance(start * blocks)
    raw = bg.random_raw(count * blocks * 4).reshape(count, blocks * 4)[:, : steps * dim]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
    return ndtri(u).reshape(count, steps, dim)


def increments(seed: int, channel: int, start: int, stop: int, steps: int, dim: int, dt: float) -> np.ndarray:
    """Brownian increments for paths [start, stop) on a grid of ``steps`` steps."""
    return np.sqrt(dt) * standard_normals(seed, channel, start, stop, steps, dim)


def channel_block(seed: int, channels, start: int, stop: int, steps: int, dim: int, dt: float) -> np.ndarray:
    """Increments for several channels, shape (stop-start, steps, len(channels), dim)."""
    out = np.empty((stop - start, steps, len(channels), dim))
    for idx, ch in enumerate(channels):
        out[:, :, idx, :] = increments(seed, ch, start, stop, steps, dim, dt)
    return out
