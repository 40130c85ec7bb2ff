"""Seeding helpers: independent RNG streams keyed by integer tuples."""
import os
import random

import numpy as np
import torch


def key_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1, np.uint64)[0] >> 1)


def keyed_generator(*keys: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(key_seed(*keys))
    return g


def keyed_numpy(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def num_workers() -> int:
    """Data worker cap from DT_NUM_WORKERS (default 1)."""
    return max(1, int(os.environ.get("DT_NUM_WORKERS", "1")))
