"""Deterministic random streams built on the Philox counter-based generator.

Stream splitting: every named stream is an independent Philox generator keyed
by ``SeedSequence(root_seed, spawn_key=(stable_hash(label), index))``. The
same root seed and the same call sequence therefore reproduce the same values
on every platform, and distinct labels never share a stream. Generator state
is a plain dict, so streams round-trip through checkpoints exactly.
"""

from __future__ import annotations

import zlib

import numpy as np

from .autodiff import NumericError


def _label_key(label: str) -> int:
    # crc32 is stable across platforms and Python versions.
    return zlib.crc32(label.encode("utf-8"))


class Rng:
    """One named Philox stream."""

    def __init__(self, seed: int, label: str = "root", index: int = 0):
        self.seed = int(seed)
        self.label = label
        self.index = int(index)
        ss = np.random.SeedSequence(self.seed, spawn_key=(_label_key(label), self.index))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, label: str, index: int = 0) -> "Rng":
        """Derive an independent child stream; children of the same
        (label, index) are identical no matter when they are derived."""
        return Rng(self.seed, f"{self.label}/{label}", index)

    # -- draws ---------------------------------------------------------

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    # -- checkpoint support ---------------------------------------------

    def get_state(self) -> dict:
        return {"seed": self.seed, "label": self.label, "index": self.index,
                "bitgen": self.gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.label = state["label"]
        self.index = int(state["index"])
        ss = np.random.SeedSequence(self.seed, spawn_key=(_label_key(self.label), self.index))
        self.gen = np.random.Generator(np.random.Philox(ss))
        self.gen.bit_generator.state = state["bitgen"]


def categorical_sample(logits: np.ndarray, rng: Rng) -> int:
    """Sample an action index from softmax(logits).

    Deterministic given the stream state; uses inverse-CDF sampling on the
    numerically stable softmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"categorical_sample: non-finite logits {logits}")
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.uniform()
    return int(min(np.searchsorted(np.cumsum(p), u), len(p) - 1))
