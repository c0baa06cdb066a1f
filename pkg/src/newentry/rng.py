"""Named random streams derived from one base seed.

Every stochastic component draws from its own stream so that, for example,
changing how many dropout masks are sampled never perturbs parameter
initialization.  Stream states are picklable for exact training resume.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = ("init", "dropout", "sampling", "shuffle", "data")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stream(seed: int, name: str) -> np.random.Generator:
    """A generator that depends only on (seed, name)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))


class Streams:
    """Bundle of the named generators used across a run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens = {name: stream(seed, name) for name in STREAM_NAMES}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._gens[name]

    def state_dict(self) -> dict:
        return {"seed": self.seed,
                "states": {k: g.bit_generator.state for k, g in self._gens.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.seed = state["seed"]
        for name, s in state["states"].items():
            self._gens[name].bit_generator.state = s
