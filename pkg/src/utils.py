from __future__ import annotations

from pathlib import Path

import numpy as np


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for `key` under a master seed.

    Streams depend only on (seed, key), never on the order in which they are
    requested, so parallel consumers draw the same numbers as serial ones.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
