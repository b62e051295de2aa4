"""Seed stream splitting.

Every random draw in an experiment comes from one top-level integer seed.
A stream is identified by ``(seed, role, *indices)``: the role string is
hashed to a stable 32-bit code with CRC-32 and the tuple is handed to
:class:`numpy.random.SeedSequence` as its spawn key. Changing one factor of
an experiment (say, the number of auxiliary samples) therefore never
reshuffles draws that belong to a different role.

Roles used by the package:

``data``       synthetic training pool
``test``       synthetic held-out set
``aux``        auxiliary-set reservation
``partition``  user partitioning
``init``       model initialisation
``local``      per-(user, round) local shuffling and dropout masks
``defense``    per-(user, round) DP noise
``guess``      random-guess baseline
"""

from __future__ import annotations

import zlib

import numpy as np


def role_code(role: str) -> int:
    return zlib.crc32(role.encode("utf-8"))


def seed_sequence(seed: int, role: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(role_code(role), *map(int, index)))


def stream(seed: int, role: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, role, *index)``."""
    return np.random.default_rng(seed_sequence(seed, role, *index))
