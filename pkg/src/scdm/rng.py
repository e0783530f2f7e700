"""Keyed, counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, purpose, *indices)``. Philox is counter based, so the
``k``-th value of a stream depends only on the key and ``k``. Drawing an
``H x W`` array row-major from a map-keyed stream therefore ties cell
``(i, j)`` to counter ``i * W + j`` regardless of how maps are distributed
over workers.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

SEED_ENV_VAR = "SCDM_SEED"


def purpose_id(purpose: str) -> int:
    """Stable 32-bit id for a purpose label."""
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator for sub-stream ``(seed, purpose, *indices)``.

    Example:
        >>> a = stream(7, "x_T", 0).standard_normal(3)
        >>> b = stream(7, "x_T", 0).standard_normal(3)
        >>> bool((a == b).all())
        True
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (purpose_id(purpose),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def pixel_uniforms(seed: int, purpose: str, shape: tuple[int, int], *indices: int) -> np.ndarray:
    """Uniform(0, 1) draws for every cell of a map, keyed per map."""
    return stream(seed, purpose, *indices).random(shape)


def resolve_seed(seed: int | None, default: int = 0) -> int:
    """Explicit seed, else ``$SCDM_SEED``, else ``default``."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env:
        return int(env)
    return default
