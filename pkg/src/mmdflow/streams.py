"""Splittable random streams.

Every random consumer in the package derives its generator from a global seed
plus a named path, via ``numpy.random.SeedSequence`` spawn keys. Distinct paths
give statistically independent streams, so datasets, latent draws, flow
projections and training shuffles never share state no matter how many of each
a pipeline requests.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "spawn_key_for"]


def spawn_key_for(*path: str | int) -> tuple[int, ...]:
    """Map a label path to a SeedSequence spawn key (tuple of uint32)."""
    key = []
    for part in path:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"stream path parts must be str or int, got {part!r}")
        if isinstance(part, int):
            if part < 0:
                raise ValueError("integer stream path parts must be nonnegative")
            key.append(part & 0xFFFFFFFF)
            key.append((part >> 32) & 0xFFFFFFFF)
        else:
            # crc32 is stable across processes and platforms, unlike hash()
            key.append(zlib.crc32(part.encode("utf-8")))
    return tuple(key)


def substream(seed: int, *path: str | int) -> np.random.Generator:
    """Generator for the stream addressed by (seed, path).

    The same (seed, path) always yields a generator in the same state;
    different paths never collide with each other or with the root stream.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=spawn_key_for(*path))
    return np.random.default_rng(ss)
