"""Seeding: one u64 run seed fans out into named, independent sub-streams."""

from __future__ import annotations

import hashlib

import numpy as np


def stream(run_seed: int, name: str) -> np.random.Generator:
    """A generator for the named sub-stream of a run seed.

    The name is hashed (stably) into extra SeedSequence entropy, so streams
    are independent, reproducible across processes, and insensitive to the
    order they are created in.
    """
    digest = hashlib.sha256(name.encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([run_seed & (2**64 - 1), *words]))


def generator_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen
