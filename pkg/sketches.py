"""
Linear and sampling sketches for frequency moments.

SignSketch (AMS, F2 and inner products), BucketSignSketch (one count-sketch row
for F2), StableSketch (Li geometric mean, Fp for p in (0, 2]), F0Sketch (level
sampling), CountSketchTable (point queries and L2 heavy hitters) and
FpLargeTracker (level-set estimation for integer p > 2). SketchBank and
BankGroup update many sketches from one hash evaluation.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

from helpers import (
    CapacityError,
    DomainError,
    IncompatibleSketchError,
    ParameterError,
    StreamFormatError,
    ceil_log2,
    check_delta,
    check_eps,
    config_value,
    constants_mode,
    median_of_means,
    practical_constant,
)
from rand_core import FIELD_PRIME, HashRows, KWiseHash, Seed, derive_seed, stable_column, stable_entries

logger = logging.getLogger("Sketches")

SERIAL_MAGIC = b"SKCH"
SERIAL_VERSION = 1
FAMILY_TAGS = {"sign": 1, "stable": 2, "f0": 3, "countsketch": 4}


@dataclass(frozen=True)
class TrackerConfig:
    eps: float
    delta: float = 0.1
    mode: str = "pointwise"
    constants_mode: str = "practical"
    checkpoints: int = 1

    def __post_init__(self):
        check_eps(self.eps)
        check_delta(self.delta)
        if self.mode not in ("pointwise", "strong-tracking"):
            raise ParameterError(f"tracker mode must be pointwise or strong-tracking, got {self.mode!r}")
        constants_mode(self.constants_mode)
        if self.checkpoints < 1:
            raise ParameterError("checkpoint budget must be positive")

    @property
    def effective_delta(self):
        # union-bound mode: delta is split across the checkpoint budget
        if self.mode == "strong-tracking":
            return self.delta / self.checkpoints
        return self.delta

    def group_size(self, multiple=1):
        c = practical_constant() if self.constants_mode == "practical" else 6.0
        size = math.ceil(c / self.eps ** 2)
        return multiple * math.ceil(size / multiple)

    def groups(self):
        c = practical_constant() if self.constants_mode == "practical" else 48.0
        return max(1, math.ceil(c * math.log(1.0 / self.effective_delta) / 8.0))

    def rows(self, multiple=1):
        return self.group_size(multiple) * self.groups()


def _check_compatible(a, b):
    if a.compat_key != b.compat_key:
        raise IncompatibleSketchError(
            f"sketches differ in family, seed or dimension: {a.compat_key[:1] + a.compat_key[2:]} vs "
            f"{b.compat_key[:1] + b.compat_key[2:]}"
        )


class SignSketch:
    """
    y = Mx with M entries +-1/sqrt(d), four-wise independent signs per row.

    A sketch allocated from a SketchBank shares its accumulator with the bank and
    is updated through the bank only.
    """

    family = "sign"

    def __init__(self, d, seed, hashes=None, y=None, groups=1, offset=0):
        if d < 1:
            raise ParameterError(f"row count must be positive, got {d}")
        self.d = int(d)
        self.seed = seed
        self.offset = offset
        self.hashes = hashes if hashes is not None else HashRows.from_seed(seed, rows=self.d, k=4)
        self.y = np.zeros(self.d) if y is None else y
        self.groups = groups
        self.scale = 1.0 / math.sqrt(self.d)

    @property
    def compat_key(self):
        return (self.family, self.seed.value, self.offset, self.d)

    @property
    def rows(self):
        return self.d

    def update(self, item, delta=1):
        self.y += (delta * self.scale) * self.hashes.signs(item)

    def update_many(self, items, deltas=None):
        items = np.asarray(items, dtype=np.int64)
        if items.size == 0:
            return
        deltas = np.ones(items.size) if deltas is None else np.asarray(deltas, dtype=float)
        signs = self.hashes.signs_many(items)
        self.y += self.scale * (signs @ deltas)

    def snapshot(self):
        return SignSketch(self.d, self.seed, self.hashes, self.y.copy(), self.groups, self.offset)

    def minus(self, other):
        _check_compatible(self, other)
        return SignSketch(self.d, self.seed, self.hashes, self.y - other.y, self.groups, self.offset)

    def merge(self, other):
        _check_compatible(self, other)
        self.y += other.y
        return self

    def truncated(self, rows):
        rows = min(int(rows), self.d)
        clone = SignSketch(rows, self.seed, self.hashes.select(slice(0, rows)), None, self.groups, self.offset)
        clone.y = self.y[:rows] * math.sqrt(self.d / rows)
        return clone


class StableSketch:
    """y = Ax with A i.i.d. p-stable; rows are grouped q at a time by the estimator."""

    family = "stable"

    def __init__(self, d, p, seed, q=None, y=None, groups=1, offset=0, truncation=None):
        q = int(q or config_value("q", 3))
        if d < q or d % q:
            raise ParameterError(f"row count {d} must be a positive multiple of q={q}")
        if not (0 < p <= 2):
            raise ParameterError(f"p must lie in (0, 2], got {p}")
        self.d = int(d)
        self.p = float(p)
        self.q = q
        self.seed = seed
        self.offset = offset
        self.truncation = truncation
        self.groups = groups
        self.y = np.zeros(self.d) if y is None else y

    @property
    def compat_key(self):
        return (self.family, self.seed.value, self.offset, self.d, self.p, self.q)

    @property
    def rows(self):
        return self.d

    def column(self, item):
        return stable_column(self.seed, int(item), self.d, self.p, self.truncation)

    def update(self, item, delta=1):
        self.y += delta * self.column(item)

    def snapshot(self):
        return StableSketch(self.d, self.p, self.seed, self.q, self.y.copy(), self.groups, self.offset, self.truncation)

    def minus(self, other):
        _check_compatible(self, other)
        return StableSketch(self.d, self.p, self.seed, self.q, self.y - other.y, self.groups, self.offset, self.truncation)

    def merge(self, other):
        _check_compatible(self, other)
        self.y += other.y
        return self


class BucketSignSketch:
    """
    One count-sketch row: y[h(i)] += s(i) * delta over d buckets. y @ y is an
    unbiased F2 estimate with variance at most 2 * F2**2 / d, as for the dense
    sketch, at constant update cost.
    """

    family = "bucket"

    def __init__(self, d, seed, bucket_hash=None, sign_hash=None, y=None, offset=0):
        if d < 1:
            raise ParameterError(f"bucket count must be positive, got {d}")
        self.d = int(d)
        self.seed = seed
        self.offset = offset
        self.groups = 1
        self.bucket_hash = bucket_hash if bucket_hash is not None else HashRows.from_seed(derive_seed(seed, "bucket"), 1, k=2)
        self.sign_hash = sign_hash if sign_hash is not None else HashRows.from_seed(derive_seed(seed, "sign"), 1, k=4)
        self.y = np.zeros(self.d) if y is None else y

    @property
    def compat_key(self):
        return (self.family, self.seed.value, self.offset, self.d)

    @property
    def rows(self):
        return self.d

    def update(self, item, delta=1):
        bucket = int(self.bucket_hash.evaluate(item)[0] % self.d)
        self.y[bucket] += delta * int(self.sign_hash.signs(item)[0])

    def snapshot(self):
        return BucketSignSketch(self.d, self.seed, self.bucket_hash, self.sign_hash, self.y.copy(), self.offset)

    def minus(self, other):
        _check_compatible(self, other)
        return BucketSignSketch(self.d, self.seed, self.bucket_hash, self.sign_hash, self.y - other.y, self.offset)

    def merge(self, other):
        _check_compatible(self, other)
        self.y += other.y
        return self


class SketchBank:
    """
    Many sketches over one seed, updated with a single vectorized pass. The
    sketches in `views` hold slices of the bank accumulator. Sign banks hold
    BucketSignSketch views (one hash row each); stable banks hold StableSketch
    views over one shared column. A retired view is no longer updated.
    """

    def __init__(self, family, seed, sizes, p=None, q=None):
        if family not in ("sign", "stable"):
            raise ParameterError(f"banks hold sign or stable sketches, not {family!r}")
        self.family = family
        self.seed = seed
        self.p = p
        self.q = int(q or config_value("q", 3))
        self.sizes = np.array([int(s) for s in sizes], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        self.total = int(self.sizes.sum())
        self.y = np.zeros(self.total)
        self.views = []
        self.active = np.ones(len(self.sizes), dtype=bool)
        self.group = None
        self._index = {}
        if family == "sign":
            self.bucket_hash = HashRows.from_seed(derive_seed(seed, "bucket"), rows=len(self.sizes), k=2)
            self.sign_hash = HashRows.from_seed(derive_seed(seed, "sign"), rows=len(self.sizes), k=4)
        for i, (size, offset) in enumerate(zip(self.sizes, self.offsets)):
            block = slice(int(offset), int(offset + size))
            if family == "sign":
                view = BucketSignSketch(int(size), seed, self.bucket_hash.select([i]), self.sign_hash.select([i]),
                                        self.y[block], offset=int(offset))
            else:
                view = StableSketch(int(size), p, seed, self.q, self.y[block], offset=int(offset))
            self._index[id(view)] = i
            self.views.append(view)
        self._refresh()

    def _refresh(self):
        live = np.nonzero(self.active)[0]
        self.live_offsets = self.offsets[live]
        self.live_sizes = self.sizes[live]
        if self.family == "sign":
            self.live_buckets = self.bucket_hash.select(live)
            self.live_signs = self.sign_hash.select(live)
        else:
            spans = [np.arange(o, o + s) for o, s in zip(self.live_offsets, self.live_sizes)]
            self.live_rows = np.concatenate(spans) if spans else np.zeros(0, dtype=np.int64)
        if self.group is not None:
            self.group.invalidate()

    @property
    def live_total(self):
        return int(self.live_sizes.sum())

    def retire(self, view):
        i = self._index.get(id(view))
        if i is None or not self.active[i]:
            return
        self.active[i] = False
        self._refresh()

    def placement(self, item):
        """Accumulator index and sign of `item` in every live sign view."""
        return self.live_offsets + self.live_buckets.evaluate(item) % self.live_sizes, self.live_signs.signs(item)

    def update(self, item, delta=1):
        if self.live_offsets.size == 0:
            return
        if self.family == "sign":
            index, signs = self.placement(item)
            self.y[index] += delta * signs
        else:
            self.y[self.live_rows] += delta * stable_entries(self.seed, int(item), self.total, self.p, self.live_rows)


class BankGroup:
    """
    Sign banks of several epochs updated from one hash evaluation; stable banks
    are passed through. The stacked hash rows are rebuilt when a member joins,
    leaves or retires a view.
    """

    def __init__(self):
        self.banks = []
        self._stale = True
        self._segments = []

    def add(self, bank):
        bank.group = self
        self.banks.append(bank)
        self.invalidate()

    def discard(self, bank):
        if bank in self.banks:
            self.banks.remove(bank)
            bank.group = None
            self.invalidate()

    def invalidate(self):
        self._stale = True

    def _rebuild(self):
        signed = [b for b in self.banks if b.family == "sign" and b.live_offsets.size]
        self._buckets = HashRows.stack([b.live_buckets for b in signed])
        self._signs = HashRows.stack([b.live_signs for b in signed])
        self._offsets = np.concatenate([b.live_offsets for b in signed]) if signed else np.zeros(0, dtype=np.int64)
        self._sizes = np.concatenate([b.live_sizes for b in signed]) if signed else np.ones(0, dtype=np.int64)
        bounds = np.cumsum([0] + [b.live_offsets.size for b in signed])
        self._segments = [(b, int(s), int(e)) for b, s, e in zip(signed, bounds[:-1], bounds[1:])]
        self._stable = [b for b in self.banks if b.family == "stable"]
        self._stale = False

    @property
    def rows(self):
        return sum(b.live_total for b in self.banks)

    def update(self, item, delta=1):
        if self._stale:
            self._rebuild()
        for bank in self._stable:
            bank.update(item, delta)
        if not self._segments:
            return
        index = self._offsets + self._buckets.evaluate(item) % self._sizes
        values = delta * self._signs.signs(item)
        for bank, start, stop in self._segments:
            bank.y[index[start:stop]] += values[start:stop]


def f2_estimate(sketch, groups=None):
    groups = sketch.groups if groups is None else groups
    if groups <= 1:
        return float(sketch.y @ sketch.y)
    return max(0.0, median_of_means(sketch.d * sketch.y ** 2, groups))


def inner_product_estimate(su, sv):
    _check_compatible(su, sv)
    return float(su.y @ sv.y)


def c_qp(q, p):
    """Normalizer making Li's geometric-mean estimator unbiased; valid for q > 1."""
    if not (0 < p <= 2):
        raise ParameterError(f"p must lie in (0, 2], got {p}")
    if q <= 1:
        raise ParameterError(f"gamma pole: q must exceed 1, got {q}")
    base = (2.0 / math.pi) * special.gamma(1.0 - 1.0 / q) * special.gamma(p / q) * math.sin(math.pi * p / (2.0 * q))
    if not np.isfinite(base) or base <= 0:
        raise ParameterError(f"C_(q,p) undefined at q={q}, p={p}")
    return float(base ** (-q))


def xi_constant(q, p):
    """
    Ratio with Var(z) = (xi**2 - 1) * Fp**2 for Li's estimator.

    Here c_qp is the normalising constant (E prod |y|**(p/q))**-1, so the ratio
    reads c_qp(q, p) / c_qp(q/2, p). Written with the expectations themselves
    (the reciprocals) the same quantity is E(q/2 terms) / E(q terms), which is
    why it can appear inverted elsewhere.
    """
    return c_qp(q, p) / c_qp(q / 2.0, p)


def li_terms(y, p, q):
    groups = y.reshape(-1, q)
    return c_qp(q, p) * np.prod(np.abs(groups) ** (p / q), axis=1)


def li_fp_estimate(sketch, groups=None):
    groups = sketch.groups if groups is None else groups
    terms = li_terms(sketch.y, sketch.p, sketch.q)
    if groups <= 1:
        return float(terms.mean())
    return median_of_means(terms, groups)


def fp_strong_track(sketch, updates, checkpoints):
    """
    Feed `updates` into `sketch`, recording the estimate after each position in
    `checkpoints` (1-indexed update counts).
    """
    wanted = sorted(set(int(c) for c in checkpoints))
    estimates = {}
    position = 0
    cursor = 0
    for item, delta in updates:
        if delta < 0:
            raise DomainError("strong tracking is defined for insertion-only streams")
        sketch.update(item, delta)
        position += 1
        while cursor < len(wanted) and wanted[cursor] == position:
            estimates[position] = li_fp_estimate(sketch) if sketch.family == "stable" else f2_estimate(sketch)
            cursor += 1
    return [estimates[c] for c in wanted if c in estimates]


class F0Sketch:
    """Nested level samples of item fingerprints; level k keeps items with h(i) < P / 2**k."""

    family = "f0"
    max_levels = 32

    def __init__(self, capacity, seed, universe=None):
        if capacity < 1:
            raise ParameterError("F0 level capacity must be positive")
        self.capacity = int(capacity)
        self.seed = seed
        self.universe = universe
        self.level_hash = KWiseHash.from_seed(derive_seed(seed, "level"), k=2, universe=universe)
        self.fingerprint_hash = KWiseHash.from_seed(derive_seed(seed, "fingerprint"), k=2, universe=universe)
        self.levels = [set() for _ in range(self.max_levels)]
        self.overflowed = [False] * self.max_levels

    @property
    def compat_key(self):
        return (self.family, self.seed.value, 0, self.capacity)

    @property
    def rows(self):
        return self.capacity

    def item_level(self, item):
        h = int(self.level_hash.evaluate(item))
        return min(self.max_levels - 1, (FIELD_PRIME // (h + 1)).bit_length() - 1)

    def fingerprint(self, item):
        return int(self.fingerprint_hash.evaluate(item))

    def update(self, item, delta=1):
        if delta < 0:
            raise DomainError("the F0 level sample is an insertion-only sketch")
        if self.universe is not None:
            self.level_hash.check_item(item)
        fp = self.fingerprint(item)
        for k in range(self.item_level(item) + 1):
            if self.overflowed[k]:
                continue
            level = self.levels[k]
            level.add(fp)
            if len(level) > self.capacity:
                self.overflowed[k] = True
                level.clear()

    def snapshot(self):
        clone = F0Sketch.__new__(F0Sketch)
        clone.__dict__.update(self.__dict__)
        clone.levels = [set(level) for level in self.levels]
        clone.overflowed = list(self.overflowed)
        return clone

    def merge(self, other):
        _check_compatible(self, other)
        for k in range(self.max_levels):
            if self.overflowed[k] or other.overflowed[k]:
                self.overflowed[k] = True
                self.levels[k].clear()
                continue
            self.levels[k] |= other.levels[k]
            if len(self.levels[k]) > self.capacity:
                self.overflowed[k] = True
                self.levels[k].clear()
        return self

    def level_for_count(self, target):
        """Lowest non-overflowed level holding at most `target` survivors."""
        for k in range(self.max_levels):
            if not self.overflowed[k] and len(self.levels[k]) <= target:
                return k
        raise CapacityError("every F0 level overflowed; capacity misconfigured")


def f0_estimate(sketch):
    live = [k for k in range(sketch.max_levels) if not sketch.overflowed[k]]
    if not live:
        raise CapacityError("every F0 level overflowed; capacity misconfigured")
    if live[0] == 0:
        return float(len(sketch.levels[0]))
    for k in live:
        if len(sketch.levels[k]) >= sketch.capacity / 4:
            return float(2 ** k * len(sketch.levels[k]))
    k = live[0]
    return float(2 ** k * len(sketch.levels[k]))


class CountSketchTable:
    family = "countsketch"

    def __init__(self, rows, buckets, seed, universe=None, cells=None):
        if rows < 1 or buckets < 2:
            raise ParameterError(f"count sketch needs rows >= 1 and buckets >= 2, got {rows}x{buckets}")
        self.r = int(rows)
        self.b = int(buckets)
        self.seed = seed
        self.universe = universe
        self.bucket_hash = HashRows.from_seed(derive_seed(seed, "bucket"), rows=self.r, k=2)
        self.sign_hash = HashRows.from_seed(derive_seed(seed, "sign"), rows=self.r, k=4)
        self.cells = np.zeros((self.r, self.b)) if cells is None else cells
        self._row_index = np.arange(self.r)
        self._universe_cache = None

    @classmethod
    def for_accuracy(cls, eps, seed, universe=None, delta=None):
        check_eps(eps)
        buckets = math.ceil(float(config_value("hh_bucket_constant", 32)) / eps ** 2)
        if universe is not None:
            buckets = min(buckets, max(16, 8 * universe))
        rows = int(config_value("hh_rows", 7))
        if delta is not None:
            rows = max(rows, math.ceil(practical_constant() * math.log(1.0 / check_delta(delta))))
        rows += 1 - rows % 2
        return cls(rows, buckets, seed, universe)

    @property
    def compat_key(self):
        return (self.family, self.seed.value, 0, self.r, self.b)

    @property
    def rows(self):
        return self.r

    def locate(self, item):
        return self.bucket_hash.evaluate(item) % self.b, self.sign_hash.signs(item)

    def update(self, item, delta=1):
        buckets, signs = self.locate(item)
        self.cells[self._row_index, buckets] += delta * signs

    def row_estimates(self, item):
        buckets, signs = self.locate(item)
        return signs * self.cells[self._row_index, buckets]

    def _locate_many(self, items):
        if items is None:
            if self.universe is None:
                raise ParameterError("enumerating candidates needs a declared universe")
            if self._universe_cache is None:
                everything = np.arange(self.universe)
                self._universe_cache = (
                    self.bucket_hash.evaluate_many(everything) % self.b,
                    self.sign_hash.signs_many(everything),
                )
            return self._universe_cache
        items = np.asarray(items, dtype=np.int64)
        return self.bucket_hash.evaluate_many(items) % self.b, self.sign_hash.signs_many(items)

    def query_many(self, items=None, cells=None):
        cells = self.cells if cells is None else cells
        buckets, signs = self._locate_many(items)
        return np.median(signs * cells[self._row_index[:, None], buckets], axis=0)

    def f2_estimate(self, cells=None):
        cells = self.cells if cells is None else cells
        return float(np.median((cells ** 2).sum(axis=1)))

    def snapshot(self):
        clone = CountSketchTable.__new__(CountSketchTable)
        clone.__dict__.update(self.__dict__)
        clone.cells = self.cells.copy()
        return clone

    def minus(self, other):
        _check_compatible(self, other)
        clone = self.snapshot()
        clone.cells -= other.cells
        return clone

    def merge(self, other):
        _check_compatible(self, other)
        self.cells += other.cells
        return self


def countsketch_query(table, item):
    return float(np.median(table.row_estimates(item)))


def l2_heavy_hitters(table, f2est, eps, candidates=None):
    """Items whose estimate clears 3/4 of eps * L2, largest first."""
    if f2est <= 0:
        return []
    items = np.arange(table.universe) if candidates is None else np.asarray(candidates, dtype=np.int64)
    estimates = table.query_many(None if candidates is None else items)
    threshold = 0.75 * eps * math.sqrt(f2est)
    keep = np.nonzero(estimates >= threshold)[0]
    order = keep[np.argsort(-estimates[keep], kind="stable")]
    return [(int(items[i]), float(estimates[i])) for i in order]


class FpLargeTracker:
    """
    Level-set Fp estimation for integer p in [3, 8]: nested subsampling levels,
    one count sketch per level, and each frequency band counted at the shallowest
    level where its items clear the sketch noise.
    """

    def __init__(self, p, eps, universe, seed, buckets=None, rows=None):
        if int(p) != p or not (3 <= p <= 8):
            raise ParameterError(f"large-moment tracker needs integer p in [3, 8], got {p}")
        check_eps(eps)
        if universe is None or universe < 1:
            raise ParameterError("large-moment tracker needs a declared universe")
        self.p = int(p)
        self.eps = eps
        self.universe = int(universe)
        self.seed = seed
        c = practical_constant()
        b = buckets or math.ceil(c * self.p ** 2 / eps ** 2)
        self.b = int(max(16, min(b, 8 * self.universe)))
        r = int(rows or config_value("hh_rows", 7))
        self.r = r + 1 - r % 2
        self.levels = 1 + max(0, ceil_log2(8 * self.universe / self.b))
        self.kappa = float(config_value("fp_large_heavy_sigma", 4))
        self.level_hash = KWiseHash.from_seed(derive_seed(seed, "level"), k=4, universe=self.universe)
        self.bucket_hash = HashRows.from_seed(derive_seed(seed, "bucket"), rows=self.levels * self.r, k=2)
        self.sign_hash = HashRows.from_seed(derive_seed(seed, "sign"), rows=self.levels * self.r, k=4)
        self.state = np.zeros(self.levels * self.r * self.b)
        self._item_cache = {}
        self._universe_cache = None

    @property
    def size(self):
        return self.state.size

    @property
    def rows(self):
        return self.levels * self.r

    def _level_of(self, h):
        return np.minimum(self.levels - 1, np.floor(np.log2(FIELD_PRIME / (np.asarray(h, dtype=float) + 1.0))).astype(int))

    def _locate(self, item):
        cached = self._item_cache.get(item)
        if cached is None:
            self.level_hash.check_item(item)
            level = int(self._level_of(self.level_hash.evaluate(item)))
            active = (level + 1) * self.r
            base = np.repeat(np.arange(self.levels) * self.r * self.b, self.r) + np.tile(np.arange(self.r) * self.b, self.levels)
            flat = base + self.bucket_hash.evaluate(item) % self.b
            signs = self.sign_hash.signs(item).astype(float)
            cached = (flat[:active], signs[:active])
            self._item_cache[item] = cached
        return cached

    def update(self, item, delta=1):
        flat, signs = self._locate(item)
        self.state[flat] += delta * signs

    def _universe(self):
        if self._universe_cache is None:
            everything = np.arange(self.universe)
            levels = self._level_of(self.level_hash.evaluate(everything))
            buckets = (self.bucket_hash.evaluate_many(everything) % self.b).reshape(self.levels, self.r, -1)
            signs = self.sign_hash.signs_many(everything).reshape(self.levels, self.r, -1)
            self._universe_cache = (levels, buckets, signs)
        return self._universe_cache

    def level_estimates(self, state=None):
        """Per level: (surviving item ids, frequency estimates, level F2 estimate)."""
        return [(survivors, est[0], float(f2[0])) for survivors, est, f2 in self._level_tables(state)]

    def _level_tables(self, states=None):
        """level_estimates over a stack of states: estimates are (states, survivors), F2 is (states,)."""
        states = self.state if states is None else states
        tables = np.asarray(states, dtype=float).reshape(-1, self.levels, self.r, self.b)
        levels, buckets, signs = self._universe()
        rows = np.arange(self.r)[:, None]
        out = []
        for level in range(self.levels):
            survivors = np.nonzero(levels >= level)[0]
            cells = tables[:, level][:, rows, buckets[level][:, survivors]]
            estimates = np.median(signs[level][:, survivors] * cells, axis=1)
            f2 = np.median((tables[:, level] ** 2).sum(axis=2), axis=1)
            out.append((survivors, estimates, f2))
        return out

    def point_estimates(self, state=None):
        """Level-0 frequency estimate for every item in the universe."""
        survivors, estimates, _ = self.level_estimates(state)[0]
        return estimates

    def estimate_many(self, states):
        """
        One estimate per state. A frequency band [2**k, 2**(k+1)) is read at the
        shallowest level whose noise floor lies below 2**k, or at the deepest level
        when none does, and scaled by that level's sampling rate.
        """
        per_level = self._level_tables(states)
        noise = np.stack([self.kappa * np.sqrt(f2 / self.b) for _, _, f2 in per_level], axis=1)
        total = np.zeros(noise.shape[0])
        last = self.levels - 1
        for level, (_, est, _) in enumerate(per_level):
            magnitude = np.abs(est)
            counted = magnitude >= 1
            low = np.exp2(np.floor(np.log2(np.where(counted, magnitude, 1.0))))
            chosen = counted & (low < noise[:, :level].min(axis=1, initial=np.inf)[:, None])
            if level < last:
                chosen &= low >= noise[:, level:level + 1]
            total += (2 ** level) * (np.where(chosen, magnitude, 0.0) ** self.p).sum(axis=1)
        return total

    def estimate(self, state=None):
        return float(self.estimate_many(self.state if state is None else state)[0])


def fp_large_tracker(updates, p, eps, delta, universe, seed):
    check_delta(delta)
    tracker = FpLargeTracker(p, eps, universe, seed)
    for item, change in updates:
        if change < 0:
            raise DomainError("the large-moment tracker is insertion-only")
        tracker.update(item, change)
    return tracker.estimate()


def dump_sketch(sketch):
    """Versioned little-endian blob: header, JSON metadata, float64 body."""
    meta = {"family": sketch.family, "seed": sketch.seed.value, "lineage": list(sketch.seed.lineage)}
    if sketch.family == "sign":
        meta.update(d=sketch.d, offset=sketch.offset, groups=sketch.groups, salts=[int(s) for s in sketch.hashes.salts])
        arrays = [sketch.y, sketch.hashes.coefficients.astype("<f8")]
    elif sketch.family == "stable":
        meta.update(d=sketch.d, p=sketch.p, q=sketch.q, offset=sketch.offset, groups=sketch.groups,
                    truncation=sketch.truncation)
        arrays = [sketch.y]
    elif sketch.family == "countsketch":
        meta.update(rows=sketch.r, buckets=sketch.b, universe=sketch.universe)
        arrays = [sketch.cells.ravel()]
    elif sketch.family == "f0":
        meta.update(capacity=sketch.capacity, universe=sketch.universe, overflowed=sketch.overflowed,
                    sizes=[len(level) for level in sketch.levels])
        arrays = [np.array(sorted(level), dtype=float) for level in sketch.levels]
    else:
        raise ParameterError(f"no serializer for sketch family {sketch.family!r}")
    meta_bytes = json.dumps(meta).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = struct.pack("<4sHBI", SERIAL_MAGIC, SERIAL_VERSION, FAMILY_TAGS[sketch.family], len(meta_bytes))
    return header + meta_bytes + body


def load_sketch(blob):
    head_size = struct.calcsize("<4sHBI")
    if len(blob) < head_size:
        raise StreamFormatError("sketch blob truncated")
    magic, version, tag, meta_len = struct.unpack("<4sHBI", blob[:head_size])
    if magic != SERIAL_MAGIC or version != SERIAL_VERSION:
        raise StreamFormatError(f"unsupported sketch blob (magic={magic!r}, version={version})")
    meta = json.loads(blob[head_size:head_size + meta_len].decode("utf-8"))
    body = np.frombuffer(blob[head_size + meta_len:], dtype="<f8")
    seed = Seed(meta["seed"], tuple(meta["lineage"]))
    family = meta["family"]
    if FAMILY_TAGS.get(family) != tag:
        raise StreamFormatError("sketch blob family tag does not match metadata")
    if family == "sign":
        d = meta["d"]
        coefficients = body[d:].astype(np.int64).reshape(d, -1)
        hashes = HashRows(coefficients.shape[1], FIELD_PRIME, coefficients, np.array(meta["salts"], dtype=np.uint64))
        return SignSketch(d, seed, hashes, body[:d].copy(), meta["groups"], meta["offset"])
    if family == "stable":
        return StableSketch(meta["d"], meta["p"], seed, meta["q"], body.copy(), meta["groups"], meta["offset"],
                            meta["truncation"])
    if family == "countsketch":
        cells = body.copy().reshape(meta["rows"], meta["buckets"])
        return CountSketchTable(meta["rows"], meta["buckets"], seed, meta["universe"], cells)
    sketch = F0Sketch(meta["capacity"], seed, meta["universe"])
    offset = 0
    for k, size in enumerate(meta["sizes"]):
        sketch.levels[k] = set(int(v) for v in body[offset:offset + size])
        offset += size
    sketch.overflowed = list(meta["overflowed"])
    return sketch
