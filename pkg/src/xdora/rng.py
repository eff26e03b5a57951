"""Deterministic random number generation.

Every stochastic component in the engine (parameter init, dropout masks,
epoch shuffling, stratified splits, bootstrap resampling) draws from a
PCG64 generator built here, so a fixed seed replays the exact same stream
on every platform. PCG64 is numpy's documented default bit generator; its
raw output for a given seed is platform-independent.

Rng instances are single-owner: never share one generator between
concurrent workers. Use ``derive_rng`` to give each work item its own
stream so serial and parallel execution produce identical results.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Generator seeded directly from ``seed`` (no OS entropy mixed in)."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for work item ``index`` (seed + index)."""
    return make_rng(int(seed) + int(index))
