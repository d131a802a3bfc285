"""
Seeded randomness for every sketch in the package.

All variates are derived from a master Seed through labelled sub-seeds, so two
sketches built from the same Seed over the same updates hold bit-identical state.
"""

import functools
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from helpers import DomainError, ParameterError, config_value

FIELD_PRIME = (1 << 31) - 1
SALT_MULTIPLIER = np.uint64(0x9E3779B97F4A7C15)
ENDPOINT_GUARD = 2.0 ** -40
SEED_BITS = 128
_SEED_MASK = (1 << SEED_BITS) - 1


@dataclass(frozen=True)
class Seed:
    value: int
    lineage: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "value", int(self.value) & _SEED_MASK)
        object.__setattr__(self, "lineage", tuple(self.lineage))

    @classmethod
    def parse(cls, text):
        """Accepts decimal or 0x-prefixed hex."""
        text = str(text).strip()
        try:
            value = int(text, 16) if text.lower().startswith("0x") else int(text)
        except ValueError:
            raise ParameterError(f"seed must be a decimal or hex integer, got {text!r}") from None
        return cls(value)

    def generator(self):
        return np.random.Generator(np.random.Philox(key=self.value))

    @property
    def label(self):
        return "/".join(self.lineage) or "root"


def derive_seed(parent, label):
    label = str(label)
    if not label.isascii():
        raise ParameterError(f"seed labels must be ASCII, got {label!r}")
    mixer = hashlib.blake2b(digest_size=SEED_BITS // 8, person=b"sketch-seed")
    mixer.update(parent.value.to_bytes(SEED_BITS // 8, "little"))
    mixer.update(b"\x00")
    mixer.update(label.encode("ascii"))
    return Seed(int.from_bytes(mixer.digest(), "little"), parent.lineage + (label,))


def _horner(coefficients, x, prime):
    # coefficients[..., 0] is the constant term; all values stay below 2**62
    acc = np.broadcast_to(coefficients[..., -1], np.broadcast_shapes(coefficients[..., -1].shape, x.shape)).copy()
    for i in range(coefficients.shape[-1] - 2, -1, -1):
        acc = (acc * x + coefficients[..., i]) % prime
    return acc


def _draw_salts(generator, size):
    return generator.integers(0, np.iinfo(np.uint64).max, size=size, dtype=np.uint64, endpoint=True)


def salted_bits(salts, items):
    """Top bit of salt + item * multiplier (mod 2**64); exactly fair for a uniform salt."""
    items = np.asarray(items, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        mixed = salts + items * SALT_MULTIPLIER
    return (mixed >> np.uint64(63)).astype(np.int64)


def signs_from_hash(values, salt_bits):
    """+-1 from the hash parity; the salt bit removes the 1/P parity bias of an odd field."""
    return 1 - 2 * ((np.asarray(values) & 1) ^ salt_bits)


@dataclass(frozen=True, eq=False)
class KWiseHash:
    """Degree-(k-1) polynomial over GF(prime), plus a 64-bit salt for fair signs."""

    k: int
    prime: int
    coefficients: np.ndarray
    universe: int = None
    salt: np.uint64 = np.uint64(0)

    def __post_init__(self):
        if self.k < 2:
            raise ParameterError(f"independence degree must be at least 2, got {self.k}")
        if self.universe is not None and self.universe > self.prime:
            raise ParameterError(f"universe {self.universe} exceeds field size {self.prime}")

    @classmethod
    def from_seed(cls, seed, k=4, prime=FIELD_PRIME, universe=None):
        gen = seed.generator()
        coefficients = gen.integers(0, prime, size=k, dtype=np.int64)
        return cls(k, prime, coefficients, universe, np.uint64(_draw_salts(gen, None)))

    def check_item(self, item):
        if item < 0 or (self.universe is not None and item >= self.universe):
            raise DomainError(f"item {item} outside universe [0, {self.universe})")

    def evaluate(self, items):
        x = np.asarray(items, dtype=np.int64) % self.prime
        return _horner(self.coefficients, x, self.prime)

    def signs(self, items):
        return signs_from_hash(self.evaluate(items), salted_bits(self.salt, items))


@dataclass(frozen=True, eq=False)
class HashRows:
    """d independent KWiseHash rows evaluated together."""

    k: int
    prime: int
    coefficients: np.ndarray
    salts: np.ndarray = None

    def __post_init__(self):
        if self.salts is None:
            object.__setattr__(self, "salts", np.zeros(self.coefficients.shape[0], dtype=np.uint64))

    @classmethod
    def from_seed(cls, seed, rows, k=4, prime=FIELD_PRIME):
        gen = seed.generator()
        coefficients = gen.integers(0, prime, size=(rows, k), dtype=np.int64)
        return cls(k, prime, coefficients, _draw_salts(gen, rows))

    @classmethod
    def stack(cls, parts):
        """One HashRows over the rows of several, in order."""
        parts = list(parts)
        if not parts:
            return cls(4, FIELD_PRIME, np.zeros((0, 4), dtype=np.int64))
        if len({(h.k, h.prime) for h in parts}) != 1:
            raise ParameterError("stacked hash rows must share degree and field")
        return cls(parts[0].k, parts[0].prime, np.concatenate([h.coefficients for h in parts]),
                   np.concatenate([h.salts for h in parts]))

    @property
    def rows(self):
        return self.coefficients.shape[0]

    def evaluate(self, item):
        """Hash of one item under every row, shape (rows,)."""
        return _horner(self.coefficients, np.int64(item % self.prime), self.prime)

    def evaluate_many(self, items):
        """Shape (rows, len(items))."""
        x = np.asarray(items, dtype=np.int64)[None, :] % self.prime
        return _horner(self.coefficients[:, None, :], x, self.prime)

    def signs(self, item):
        return signs_from_hash(self.evaluate(item), salted_bits(self.salts, item))

    def signs_many(self, items):
        """Shape (rows, len(items))."""
        items = np.asarray(items, dtype=np.int64)
        return signs_from_hash(self.evaluate_many(items), salted_bits(self.salts[:, None], items[None, :]))

    def buckets(self, item, width):
        return self.evaluate(item) % width

    def select(self, rows):
        return HashRows(self.k, self.prime, self.coefficients[rows], self.salts[rows])


def sample_sign(hash_fn, item):
    hash_fn.check_item(item)
    return int(hash_fn.signs(item))


@dataclass(frozen=True)
class StableParams:
    p: float
    truncation: float = None

    def __post_init__(self):
        if not (0 < self.p <= 2):
            raise ParameterError(f"stability index p must lie in (0, 2], got {self.p}")
        if self.truncation is not None and self.truncation <= 0:
            raise ParameterError("truncation cap must be positive")


def sample_p_stable(params, theta, r):
    """Chambers-Mallows-Stuck transform of (theta, r); vectorized over arrays."""
    p = params.p
    half_pi = math.pi / 2
    theta = np.clip(theta, -half_pi + ENDPOINT_GUARD, half_pi - ENDPOINT_GUARD)
    r = np.clip(r, ENDPOINT_GUARD, 1.0 - ENDPOINT_GUARD)
    head = np.sin(p * theta) / np.cos(theta) ** (1.0 / p)
    if p == 1:
        x = head
    else:
        x = head * (np.cos(theta * (1.0 - p)) / np.log(1.0 / r)) ** (1.0 / p - 1.0)
    if params.truncation is not None:
        x = np.clip(x, -params.truncation, params.truncation)
    return x


def stable_uniforms(seed, item, rows):
    """(theta, r) pairs for column `item` of a stable matrix; independent of other columns."""
    gen = np.random.Generator(np.random.Philox(key=seed.value, counter=int(item) << 128))
    u = gen.random((2, rows))
    return math.pi * (u[0] - 0.5), u[1]


def _stable_column(seed, item, rows, p, truncation=None):
    theta, r = stable_uniforms(seed, item, rows)
    column = sample_p_stable(StableParams(p, truncation), theta, r)
    column.setflags(write=False)
    return column


_cached_stable_column = functools.lru_cache(maxsize=int(config_value("stable_column_cache", 2048)))(_stable_column)


def stable_column(seed, item, rows, p, truncation=None):
    """Read-only column; only columns up to `stable_cache_rows` long are cached."""
    if rows > int(config_value("stable_cache_rows", 4096)):
        return _stable_column(seed, item, rows, p, truncation)
    return _cached_stable_column(seed, item, rows, p, truncation)


def stable_entries(seed, item, rows, p, index):
    """Entries `index` of the column, transformed without building the rest."""
    theta, r = stable_uniforms(seed, item, rows)
    return sample_p_stable(StableParams(p), theta[index], r[index])


def inverse_exponential_cdf(u):
    return -np.log1p(-np.asarray(u, dtype=float))


def sample_exponential(generator, size=None, cap=None):
    if cap is None:
        cap = config_value("exponential_cap")
    draws = inverse_exponential_cdf(generator.random(size))
    if cap is not None:
        draws = np.minimum(draws, cap)
    return draws
