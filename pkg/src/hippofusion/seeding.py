"""Master seed expansion and counter-based random streams.

Each random draw in the pipeline comes from a Philox generator keyed by a
sub-seed plus integer counters (sample index, iteration, ...), so the same
keys give the same numbers regardless of evaluation order or threading.
"""

from __future__ import annotations

import hashlib
from typing import Dict

import numpy as np

# Fixed positions; changing them changes every derived seed.
SUB_SEED_NAMES = ("augmentation", "init", "training", "dropout", "split", "test")


def derive_seeds(master_seed: int) -> Dict[str, int]:
    """Expand a master seed into named 63-bit sub-seeds."""
    seeds = {}
    for index, name in enumerate(SUB_SEED_NAMES):
        seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
        seeds[name] = int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
    return seeds


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def stable_key(text: str) -> int:
    """Stable 63-bit integer for a string key (run names, subject ids)."""
    digest = hashlib.md5(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
