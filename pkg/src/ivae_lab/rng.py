"""Seeded randomness on top of numpy's counter-based Philox generator.

Normal draws use Box-Muller on Philox uniforms and Laplace draws use the
inverse CDF, so the streams are fixed by this module rather than by numpy's
internal samplers.
"""

from __future__ import annotations

import numpy as np


def generator(seed: int | tuple[int, ...]) -> np.random.Generator:
    if isinstance(seed, tuple):
        seed = np.random.SeedSequence(list(seed))
    return np.random.Generator(np.random.Philox(seed))


def derive(seed: int, *labels: int | str) -> np.random.Generator:
    """Independent stream for a (seed, label...) pair."""
    words = [int(seed) & 0xFFFFFFFF]
    for lab in labels:
        if isinstance(lab, str):
            words.append(int.from_bytes(lab.encode()[:8].ljust(8, b"\0"), "little") & 0xFFFFFFFF)
        else:
            words.append(int(lab) & 0xFFFFFFFF)
    return generator(tuple(words))


def uniform(gen: np.random.Generator, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return low + (high - low) * gen.random(shape)


def normal(gen: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws via Box-Muller."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    count = int(np.prod(shape))
    half = (count + 1) // 2
    u1 = 1.0 - gen.random(half)  # (0, 1]
    u2 = gen.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
    return out.reshape(shape)


def laplace(gen: np.random.Generator, shape, scale=1.0) -> np.ndarray:
    """Zero-location Laplace draws via the inverse CDF."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    u = gen.random(shape) - 0.5
    u = np.where(u == -0.5, -0.5 + 1e-16, u)
    return -np.asarray(scale) * np.sign(u) * np.log1p(-2.0 * np.abs(u))
