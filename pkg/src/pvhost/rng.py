"""Named random substreams derived from a single study seed."""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    POOL = 1
    ALLOCATION = 2
    SCENARIO = 3
    RANDOM_SIZE = 4
    ZONAL_SIZE = 5


def substream(seed: int, stream: Stream, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream, index)``; order of creation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))
