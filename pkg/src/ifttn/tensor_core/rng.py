"""Counter-based random streams for dropout.

A stream is keyed by ``(seed, step, site)`` so the mask a dropout site draws
does not depend on how many other sites ran before it.
"""

from __future__ import annotations

import zlib

import numpy as np


class DropoutStream:
    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)

    def at(self, step: int) -> "DropoutStream":
        return DropoutStream(self.seed, step)

    def generator(self, site: str) -> np.random.Generator:
        key = zlib.crc32(site.encode("utf-8"))
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.step, key])))
