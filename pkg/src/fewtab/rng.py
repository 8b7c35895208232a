"""Deterministic random-stream derivation.

Every command derives all of its randomness from a single root seed.
Streams are keyed by (root_seed, component, *indices), so independent
pieces of work (tasks of one step, validation calls, grid points, eval
seeds) can run in any order, or in parallel, without sharing state.

The component codes below are part of the reproducibility contract:
changing one changes every downstream stream.
"""
from __future__ import annotations

import numpy as np

SPLIT = 1
INIT = 2
TASK = 3
VALIDATE = 4
EVAL = 5
GRID = 6


def derive_rng(root_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream keyed by (root_seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), *map(int, path)]))


def derive_seed(root_seed: int, *path: int) -> int:
    """Collapse a stream key to a plain integer seed."""
    seq = np.random.SeedSequence([int(root_seed), *map(int, path)])
    return int(seq.generate_state(1)[0])
