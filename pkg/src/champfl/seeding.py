"""Counter-based seed derivation.

A seed is any int or tuple of ints; ``derive(seed, *keys)`` appends integer
keys so every (stream, round, client) gets its own independent generator and
adding a consumer never shifts another stream.
"""

from __future__ import annotations

# stream ids
PARTITION = 1
INIT = 2
LOCAL = 3
BSCI = 4
POISON = 5
DATA = 6


def as_tuple(seed) -> tuple[int, ...]:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def derive(seed, *keys: int) -> tuple[int, ...]:
    return as_tuple(seed) + tuple(int(k) for k in keys)
