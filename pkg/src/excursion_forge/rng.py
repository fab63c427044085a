"""Counter-based random streams for reproducible, parallel Monte Carlo.

Every stochastic routine in this package takes a :class:`SeedSpec`. A stream is
identified by the pair ``(master_seed, stream_id)`` which keys a Philox
counter-based generator, so distinct pairs give statistically independent
streams and the same pair replays bit-identically regardless of scheduling or
worker count. Replicate fan-out allocates one stream per replicate; auxiliary
draws inside an experiment get their own domain so replicate streams never
collide across experiment stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# Domain tags keep stream ids disjoint between stages of one experiment.
# stream_id = (domain << 40) | replicate, so up to 2**40 replicates per domain.
DOMAIN_MAIN = 0
DOMAIN_AUX = 1
DOMAIN_ORACLE = 2
DOMAIN_SENSITIVITY = 3

_REPLICATE_BITS = 40


@dataclass(frozen=True)
class SeedSpec:
    """Identifier of one reproducible random stream.

    ``master_seed`` is the user-facing 64-bit seed; ``stream_id`` is the
    replicate counter (possibly domain-tagged via :func:`stream`).
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.array(
            [self.master_seed & _MASK64, self.stream_id & _MASK64],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def replicate(self, k: int) -> "SeedSpec":
        """Stream for replicate ``k`` under this spec's master seed.

        Keeps the spec's own domain tag and replaces the replicate counter.
        """
        domain = self.stream_id >> _REPLICATE_BITS
        return SeedSpec(self.master_seed, (domain << _REPLICATE_BITS) | k)


def stream(master_seed: int, domain: int, replicate: int = 0) -> SeedSpec:
    """SeedSpec for (domain, replicate) under ``master_seed``."""
    if replicate < 0 or replicate >= (1 << _REPLICATE_BITS):
        raise ValueError("replicate out of range")
    return SeedSpec(master_seed, (domain << _REPLICATE_BITS) | replicate)


class ChunkedDraws:
    """Sequential normal/uniform feeder over one stream.

    Simulation kernels consume pre-drawn arrays; when a kernel exhausts its
    chunk the feeder supplies the next one from the same stream, so the
    consumed sequence is a pure function of the SeedSpec.
    """

    def __init__(self, seed: SeedSpec, chunk: int = 1 << 14):
        self._gen = seed.generator()
        self._chunk = int(chunk)

    def normals(self, n: int | None = None) -> np.ndarray:
        return self._gen.standard_normal(self._chunk if n is None else n)

    def uniforms(self, n: int | None = None) -> np.ndarray:
        return self._gen.random(self._chunk if n is None else n)

    def grow(self, cap: int = 1 << 20) -> None:
        self._chunk = min(cap, self._chunk * 2)
