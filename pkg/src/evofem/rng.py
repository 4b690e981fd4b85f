"""Portable pseudo-random numbers for reproducible randomized checks.

The generator is the 64-bit linear congruential recurrence

    state <- (6364136223846793005 * state + 1442695040888963407) mod 2**64

(Knuth's MMIX constants).  A uniform double in [0, 1) is the top 53 bits of
the new state times 2**-53.  The state is initialised to the seed itself, so
the sequence is easy to reproduce in any language with unsigned 64-bit
arithmetic.
"""
from __future__ import annotations

import numpy as np

MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407
MASK = (1 << 64) - 1


class Lcg:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK

    def next_u64(self) -> int:
        self.state = (MULTIPLIER * self.state + INCREMENT) & MASK
        return self.state

    def uniform(self, size: int | None = None, low: float = 0.0, high: float = 1.0):
        if size is None:
            return low + (high - low) * ((self.next_u64() >> 11) * 2.0**-53)
        vals = [(self.next_u64() >> 11) * 2.0**-53 for _ in range(size)]
        return low + (high - low) * np.array(vals)
