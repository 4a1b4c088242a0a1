# compress.py - Sign compression, majority vote, random sparsification and 1-bit wire packing
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from config import TiePolicy


class CompressionError(ValueError):
    """Raised on malformed inputs to a compression primitive."""


@dataclass(frozen=True)
class SignVector:
    """Per-coordinate signs in {-1, +1}; ternary vectors (with 0) only come out of the zero tie policy."""

    signs: np.ndarray
    ternary: bool = False

    def __post_init__(self):
        allowed = (-1, 0, 1) if self.ternary else (-1, 1)
        if self.signs.ndim != 1 or not np.isin(self.signs, allowed).all():
            raise CompressionError(f"sign vector entries must lie in {allowed}")

    def __len__(self) -> int:
        return len(self.signs)

    def as_float(self) -> np.ndarray:
        return self.signs.astype(np.float64)


def sign(v: np.ndarray) -> SignVector:
    """Element-wise sign with exact zeros mapped to +1."""
    v = np.asarray(v)
    if np.isnan(v).any():
        raise CompressionError("cannot take the sign of NaN")
    return SignVector(np.where(v >= 0, 1, -1).astype(np.int8))


def majority_vote(votes: Sequence[SignVector], policy: TiePolicy, rng: np.random.Generator) -> SignVector:
    """Coordinate-wise sign of the vote sum; zero sums resolved by the tie policy."""
    if not votes:
        raise CompressionError("majority vote needs at least one vote")
    d = len(votes[0])
    for vote in votes:
        if len(vote) != d:
            raise CompressionError(f"vote of length {len(vote)} in a {d}-dimensional vote")
    total = np.sum([vote.signs for vote in votes], axis=0, dtype=np.int32)
    result = np.sign(total).astype(np.int8)

    ties = np.flatnonzero(result == 0)
    policy = TiePolicy(policy)
    if len(ties) == 0 or policy is TiePolicy.ZERO:
        return SignVector(result, ternary=len(ties) > 0)
    if policy is TiePolicy.RANDOM:
        result[ties] = rng.choice(np.array([-1, 1], dtype=np.int8), size=len(ties))
    else:
        result[ties] = 1
    return SignVector(result)


@dataclass(frozen=True)
class SparsifierSpec:
    dimension: int
    active_components: int
    variance_factor: float = field(init=False)

    def __post_init__(self):
        if not 1 <= self.active_components <= self.dimension:
            raise CompressionError(
                f"active components {self.active_components} outside [1, {self.dimension}]"
            )
        object.__setattr__(self, "variance_factor", self.dimension / self.active_components - 1.0)

    @property
    def psi(self) -> float:
        return float(np.sqrt(self.variance_factor))

    @property
    def is_identity(self) -> bool:
        return self.active_components == self.dimension

    @property
    def scale(self) -> float:
        return self.dimension / self.active_components


def random_sparsify(x: np.ndarray, spec: SparsifierSpec, rng: np.random.Generator) -> np.ndarray:
    """Keep n uniformly chosen coordinates, scaled by d/n; zero elsewhere."""
    if len(x) != spec.dimension:
        raise CompressionError(f"vector of length {len(x)} for a {spec.dimension}-dimensional sparsifier")
    if spec.is_identity:
        return np.array(x, dtype=np.float64)
    keep = rng.choice(spec.dimension, size=spec.active_components, replace=False)
    out = np.zeros(spec.dimension, dtype=np.float64)
    out[keep] = spec.scale * x[keep]
    return out


def payload_bytes(d: int) -> int:
    return (d + 7) // 8


def pack_signs(s: SignVector) -> bytes:
    """LSB-first bit packing: bit i set iff sign i is +1; padding bits are zero."""
    if s.ternary and (s.signs == 0).any():
        raise CompressionError("ternary votes have no 1-bit encoding; use the random or plus_one tie policy")
    return np.packbits(s.signs > 0, bitorder="little").tobytes()


def unpack_signs(payload: bytes, d: int) -> SignVector:
    if len(payload) != payload_bytes(d):
        raise CompressionError(f"payload of {len(payload)} bytes cannot hold exactly {d} signs")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if bits[d:].any():
        raise CompressionError("non-zero padding bits in sign payload")
    return SignVector(np.where(bits[:d] == 1, 1, -1).astype(np.int8))
