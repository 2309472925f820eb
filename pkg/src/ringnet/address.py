"""160-bit ring address arithmetic.

Addresses are plain Python ints in ``[0, 2**160)``.  The space wraps
around, forming a ring whose values increase in the clockwise direction.
Every address belongs to exactly one of 161 classes, given by the run of
consecutive 1-bits at its least significant end; even (class-0) addresses
identify ring nodes, and two fixed class-124 constants name the two ring
directions for hop-limited routing.

All functions here are pure and safe for unrestricted concurrent use.
"""

from __future__ import annotations

import enum
from random import Random

ADDRESS_BITS = 160
ADDRESS_BYTES = 20
MODULUS = 1 << ADDRESS_BITS
HALF_MODULUS = 1 << (ADDRESS_BITS - 1)

DIRECTIONAL_CLASS = 124


class Direction(enum.Enum):
    """The two senses of travel along the ring."""

    CLOCKWISE = "cw"
    COUNTERCLOCKWISE = "ccw"

    def opposite(self) -> "Direction":
        if self is Direction.CLOCKWISE:
            return Direction.COUNTERCLOCKWISE
        return Direction.CLOCKWISE


# Class-124 addresses end in one 0-bit followed by 124 1-bits; the 35 bits
# above bit 124 are free.  Clockwise keeps them all zero, counterclockwise
# sets the lowest free bit.
CLOCKWISE_ADDRESS = (1 << DIRECTIONAL_CLASS) - 1
COUNTERCLOCKWISE_ADDRESS = (1 << (DIRECTIONAL_CLASS + 1)) | CLOCKWISE_ADDRESS

_DIRECTIONAL = {
    Direction.CLOCKWISE: CLOCKWISE_ADDRESS,
    Direction.COUNTERCLOCKWISE: COUNTERCLOCKWISE_ADDRESS,
}
_DIRECTION_OF = {v: k for k, v in _DIRECTIONAL.items()}


def is_address(value: int) -> bool:
    return isinstance(value, int) and 0 <= value < MODULUS


def class_of(a: int) -> int:
    """Count of consecutive 1-bits at the least significant end of ``a``.

    Returns 160 iff every bit is set.  Class n contains 2**(159-n)
    addresses for n < 160 and exactly one address for n = 160, which
    together partition the whole space.
    """
    # Trailing ones of a == trailing zeros of a + 1.
    succ = a + 1
    return (succ & -succ).bit_length() - 1


def ring_distance(a: int, b: int) -> int:
    """Shorter arc between two addresses; symmetric, at most 2**159."""
    d = (a - b) % MODULUS
    return d if d <= HALF_MODULUS else MODULUS - d


def directed_distance(a: int, b: int, direction: Direction) -> int:
    """Arc length from ``a`` to ``b`` traveling in ``direction``."""
    if direction is Direction.CLOCKWISE:
        return (b - a) % MODULUS
    return (a - b) % MODULUS


def random_class0(rng: Random) -> int:
    """Uniform random even address, reproducible for a seeded ``rng``."""
    return rng.getrandbits(ADDRESS_BITS) & (MODULUS - 2)


def directional_address(direction: Direction) -> int:
    return _DIRECTIONAL[direction]


def direction_of(a: int) -> Direction | None:
    """Inverse of directional_address; None for any other address."""
    return _DIRECTION_OF.get(a)


def format_address(a: int) -> str:
    """40 lowercase hex digits, most significant first."""
    return format(a, "040x")


def parse_address(text: str) -> int:
    t = text.strip().lower()
    if len(t) != 2 * ADDRESS_BYTES:
        raise ValueError(f"address must be {2 * ADDRESS_BYTES} hex digits: {text!r}")
    return int(t, 16)


def address_to_bytes(a: int) -> bytes:
    return a.to_bytes(ADDRESS_BYTES, "big")


def address_from_bytes(raw: bytes) -> int:
    if len(raw) != ADDRESS_BYTES:
        raise ValueError(f"address must be {ADDRESS_BYTES} bytes, got {len(raw)}")
    return int.from_bytes(raw, "big")
