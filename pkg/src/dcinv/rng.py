"""Seeded, named random streams built on the counter-based Philox generator.

Each purpose ("fit", "cv", "uncertainty", "noise", ...) gets its own
independent stream derived from the master seed, so changing how one part
of a run consumes randomness never perturbs the others, and paired
algorithm variants can be compared on identical realizations.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngHub:
    """Dispenser of named, deterministic random streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) % 2**64
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """The generator for a named stream (created on first use)."""
        if name not in self._streams:
            bitgen = np.random.Philox(key=np.array([self.seed, _stream_key(name)], dtype=np.uint64))
            self._streams[name] = np.random.Generator(bitgen)
        return self._streams[name]

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator at the start of the named stream, ignoring prior use."""
        bitgen = np.random.Philox(key=np.array([self.seed, _stream_key(name)], dtype=np.uint64))
        return np.random.Generator(bitgen)
