"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np
import torch


def _seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent numpy generator for component ``name`` under ``seed``."""
    return np.random.default_rng(_seed_sequence(seed, name))


def torch_substream(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(_seed_sequence(seed, name).generate_state(1, dtype=np.uint64)[0] >> 1))
    return gen
