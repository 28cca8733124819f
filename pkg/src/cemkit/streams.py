"""Reproducible random streams derived from a seed and an id path.

Every random draw in a run comes from a stream addressed by a tuple like
(stage, patch_index, intervention_index). Streams with different paths are
statistically independent and do not depend on scheduling, so parallel and
sequential executions draw identical values.
"""

from __future__ import annotations

import numpy as np

# Stage ids used by the engine when deriving streams.
STAGE_FULL = 1
STAGE_COARSE = 2
STAGE_FINE = 3
STAGE_LIBRARY = 4
STAGE_DEGRADE = 5


class StreamNode:
    """A node in the stream tree: a 64-bit seed plus a path of integer ids."""

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)

    def child(self, *ids: int) -> "StreamNode":
        return StreamNode(self.seed, self.path + tuple(ids))

    def generator(self) -> np.random.Generator:
        """Instantiate the counter-based generator for this node."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"StreamNode(seed={self.seed}, path={self.path})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, StreamNode)
            and self.seed == other.seed
            and self.path == other.path
        )

    def __hash__(self) -> int:
        return hash((self.seed, self.path))


def derive_generator(seed: int, *path: int) -> np.random.Generator:
    """Shorthand for StreamNode(seed).child(*path).generator()."""
    return StreamNode(seed, tuple(path)).generator()
