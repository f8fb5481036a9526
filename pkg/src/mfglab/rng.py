"""Counter-based Gaussian streams.

Every draw is addressed by ``(seed, tag, replica, player, step)``: the seed
and stream tag form the Philox key, and the replica, player and step fix the
counter. A player's increments therefore do not depend on how many other
players were drawn alongside it, and the common-noise stream does not depend
on the population size at all.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

TAG_COMMON = 1
TAG_IDIOSYNCRATIC = 2
TAG_INITIAL = 3
TAG_SCENARIO = 4
TAG_AUX = 5

_MASK64 = (1 << 64) - 1


def _key(seed: int, tag: int) -> np.ndarray:
    return np.array([int(seed) & _MASK64, int(tag) & _MASK64], dtype=np.uint64)


def _uniforms(raw: np.ndarray) -> np.ndarray:
    # 53 high bits, shifted off the endpoints
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normal_block(seed: int, tag: int, replica: int, rows: int, row_len: int, first_row: int = 0) -> np.ndarray:
    """Standard normals for rows ``first_row .. first_row + rows - 1`` of one stream.

    Row ``i`` always occupies the same counter range, so any sub-range of
    rows reproduces the corresponding slice of a larger draw.
    """
    blocks = -(-row_len // 4)
    counter = np.array([first_row * blocks, int(replica) & _MASK64, 0, 0], dtype=np.uint64)
    gen = np.random.Philox(key=_key(seed, tag), counter=counter)
    raw = gen.random_raw(rows * blocks * 4).reshape(rows, blocks * 4)[:, :row_len]
    return ndtri(_uniforms(raw))
