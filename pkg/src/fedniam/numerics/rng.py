from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class RngStream:
    """A named random stream: the same (seed, label) always replays the same draws.

    Labels are hashed with SHA-256 rather than ``hash()`` so streams do not
    depend on PYTHONHASHSEED or the platform.
    """

    seed: int
    label: str = "root"

    def generator(self) -> np.random.Generator:
        entropy = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF, *_label_words(self.label)]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")
