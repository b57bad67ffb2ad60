"""Named random substreams derived from one top-level seed.

Every random consumer draws from its own named stream, so adding a new
consumer never shifts the draws seen by existing ones. Streams are backed
by the counter-based Philox generator, and Gaussian variates are produced
with an explicit Box-Muller transform so that sampled datasets do not
depend on the bit generator's builtin normal algorithm.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> tuple[int, int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:16], "little"),
    )


def seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    """SeedSequence for the (seed, name) stream."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=_name_key(name))


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the (seed, name) stream."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, name)))


def trial_streams(seed: int, name: str, count: int) -> list[np.random.Generator]:
    """One generator per trial index.

    Children are spawned from the named stream's SeedSequence, so trial i
    sees the same draws whether trials run serially or in parallel.
    """
    children = seed_sequence(seed, name).spawn(int(count))
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def standard_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws via Box-Muller on uniform variates."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    # 1 - U keeps the argument of log in (0, 1].
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
    return z.reshape(shape)
