"""
Difference estimators: additive estimates of F(prefix + suffix) - F(prefix).

A block ingests updates from its start time t1, is split at t2 and from then on
reports the difference contributed by the part of the stream after the split.
Fixed-prefix blocks keep the prefix as the pivot (the robust framework);
suffix-pivoted blocks keep [t1, t2) as the pivot and estimate what it adds on top
of a growing suffix (the sliding-window framework).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from helpers import (
    CapacityError,
    DomainError,
    ParameterError,
    RegistrationError,
    check_delta,
    check_eps,
    config_value,
    practical_constant,
)
from rand_core import HashRows, derive_seed, inverse_exponential_cdf
from sketches import (
    F0Sketch,
    FpLargeTracker,
    SignSketch,
    StableSketch,
    f0_estimate,
    f2_estimate,
    li_fp_estimate,
    li_terms,
)

logger = logging.getLogger("DiffEst")

DE_KINDS = ("F0", "F2", "FpSmall", "FpLarge")
FIXED_PREFIX = "fixed-prefix"
SUFFIX_PIVOTED = "suffix-pivoted"


def _log_factor(eps, delta):
    return max(1.0, math.log2(1.0 / eps) + math.log2(1.0 / delta))


@dataclass(frozen=True)
class DEDimension:
    kind: str
    gamma: float
    eps: float
    delta: float = 0.1
    p: float = 2.0
    universe: int = None
    rows_override: int = None

    def __post_init__(self):
        if self.kind not in DE_KINDS:
            raise ParameterError(f"difference estimator kind must be one of {DE_KINDS}, got {self.kind!r}")
        if not (0 < self.gamma <= 1):
            raise ParameterError(f"gamma must lie in (0, 1], got {self.gamma}")
        check_eps(self.eps)
        check_delta(self.delta)

    @property
    def q(self):
        return int(config_value("q", 3))

    def rows(self):
        if self.rows_override is not None:
            return int(self.rows_override)
        c = practical_constant()
        base = c * _log_factor(self.eps, self.delta) / self.eps ** 2
        if self.kind == "FpSmall":
            d = math.ceil(base * self.gamma ** (2.0 / self.p))
            return self.q * max(1, math.ceil(d / self.q))
        if self.kind == "FpLarge":
            n = self.universe or 1
            return max(1, math.ceil(c * self.gamma * n ** (1.0 - 2.0 / self.p) / self.eps ** 2))
        return max(1, math.ceil(base * self.gamma))


def binomial_cross_terms(p, small, big, shift=0):
    """sum_{k=1}^{p-1} C(p,k) small**k big**(p-k-shift), elementwise then summed."""
    small = np.asarray(small, dtype=float)
    big = np.asarray(big, dtype=float)
    total = np.zeros(np.broadcast(small, big).shape)
    for k in range(1, p):
        total += special.comb(p, k, exact=True) * small ** k * big ** (p - k - shift)
    return float(total.sum())


def f2_fixed_difference(frozen_y, live_y):
    w = live_y - frozen_y
    return float(2.0 * (frozen_y @ w) + w @ w)


def f2_suffix_difference(pivot_y, suffix_y):
    return float(2.0 * (pivot_y @ suffix_y) + pivot_y @ pivot_y)


def li_difference(before_y, after_y, p, q, groups=1):
    terms = li_terms(after_y, p, q) - li_terms(before_y, p, q)
    if groups <= 1:
        return float(terms.mean())
    usable = terms.size - terms.size % groups
    return float(np.median(terms[:usable].reshape(groups, -1).mean(axis=1)))


class L2SamplerBank:
    """
    Independent L2 samplers over one stream. Sampler s duplicates every item
    `duplication` times, scales copy (i, j) by 1/sqrt(e_sij) with e exponential,
    and keeps a count sketch of the scaled vector; its sample is the item owning
    the largest recovered coordinate. Samplers past `count` are retry spares.

    Candidates are the items the bank has seen; their hash placements are
    recomputed on demand, with at most `sampler_item_cache` items kept.
    """

    def __init__(self, count, seed, universe, duplication=None, buckets=None, rows=None, spares=None):
        if count < 1:
            raise ParameterError("sampler bank needs at least one sampler")
        self.requested = int(count)
        self.spares = int(config_value("sampler_retries", 8) if spares is None else spares)
        self.count = self.requested + self.spares
        self.seed = seed
        self.universe = int(universe)
        self.duplication = int(duplication or config_value("sampler_duplication", 16))
        self.b = int(buckets or config_value("sampler_buckets", 96))
        r = int(rows or config_value("sampler_rows", 5))
        self.r = r + 1 - r % 2
        self.bucket_hash = HashRows.from_seed(derive_seed(seed, "bucket"), rows=self.count * self.r, k=2)
        self.sign_hash = HashRows.from_seed(derive_seed(seed, "sign"), rows=self.count * self.r, k=4)
        self.exp_seed = derive_seed(seed, "exponential")
        self.state = np.zeros(self.count * self.r * self.b)
        self.support = set()
        self.cache_limit = int(config_value("sampler_item_cache", 512))
        self._cache = {}
        self._base = (np.arange(self.count * self.r) * self.b)[:, None]

    @property
    def size(self):
        return self.state.size

    def exponentials(self, item):
        gen = np.random.Generator(np.random.Philox(key=self.exp_seed.value, counter=int(item) << 128))
        draws = inverse_exponential_cdf(gen.random((self.count, self.duplication)))
        cap = config_value("exponential_cap")
        return draws if cap is None else np.minimum(draws, cap)

    def _locate(self, item):
        """(cells, signs, 1/sqrt(e)) for every copy of `item`; cells and signs are (count * r, duplication)."""
        cached = self._cache.get(item)
        if cached is None:
            if not 0 <= item < self.universe:
                raise DomainError(f"item {item} outside the sampler universe [0, {self.universe})")
            coords = item * self.duplication + np.arange(self.duplication)
            cells = (self._base + self.bucket_hash.evaluate_many(coords) % self.b).astype(np.int32)
            signs = self.sign_hash.signs_many(coords).astype(np.int8)
            cached = (cells, signs, 1.0 / np.sqrt(self.exponentials(item)))
            if len(self._cache) >= self.cache_limit:
                self._cache.pop(next(iter(self._cache)))
            self._cache[item] = cached
            self.support.add(item)
        return cached

    def placement(self, item):
        """Flat cell indices and weights of `item`, for callers holding their own state."""
        cells, signs, inverse = self._locate(item)
        return cells.ravel(), (signs * np.repeat(inverse, self.r, axis=0)).ravel()

    def update(self, item, delta=1):
        flat, weights = self.placement(item)
        np.add.at(self.state, flat, delta * weights)

    def remove(self, state, items, values):
        """Copy of `state` with `values[i]` of `items[i]` taken out."""
        out = state.copy()
        for item, value in zip(items, values):
            flat, weights = self.placement(int(item))
            np.subtract.at(out, flat, value * weights)
        return out

    def _chunk_rows(self, state, items):
        """Signed row readings (count, r, len(items) * duplication), item-major coordinates."""
        picked = [self._locate(int(item))[:2] for item in items]
        cells = np.stack([c for c, _ in picked], axis=-2).reshape(self.count, self.r, -1)
        signs = np.stack([s for _, s in picked], axis=-2).reshape(self.count, self.r, -1)
        return state[cells] * signs

    def _leaders(self, state, candidates, chunk):
        """Per sampler: top two coordinates by median magnitude, with their row readings."""
        lead = np.full((self.count, 2), -1, dtype=np.int64)
        size = np.zeros((self.count, 2))
        rows = np.zeros((self.count, 2, self.r))
        sampler = np.arange(self.count)[:, None]
        for start in range(0, candidates.size, chunk):
            items = candidates[start:start + chunk]
            readings = self._chunk_rows(state, items)
            magnitude = np.abs(np.median(readings, axis=1))
            order = np.argsort(-magnitude, axis=1, kind="stable")[:, :2]
            coords = (items[:, None] * self.duplication + np.arange(self.duplication)).ravel()
            pool_lead = np.concatenate([lead, coords[order]], axis=1)
            pool_size = np.concatenate([size, np.take_along_axis(magnitude, order, axis=1)], axis=1)
            picked_rows = np.take_along_axis(readings, order[:, None, :], axis=2).transpose(0, 2, 1)
            pool_rows = np.concatenate([rows, picked_rows], axis=1)
            best = np.argsort(-pool_size, axis=1, kind="stable")[:, :2]
            lead = pool_lead[sampler, best]
            size = pool_size[sampler, best]
            rows = pool_rows[sampler, best]
        return lead, size, rows

    def sample(self, state=None, count=None):
        """One (item, frequency estimate) or None per requested sampler."""
        state = self.state if state is None else state
        count = self.requested if count is None else min(int(count), self.requested)
        candidates = np.array(sorted(self.support), dtype=np.int64)
        if candidates.size == 0:
            return [None] * count
        chunk = max(1, min(self.cache_limit, 2048 // self.duplication))
        lead, size, rows = self._leaders(state, candidates, chunk)
        first, second = size[:, 0], size[:, 1]
        # row disagreement on the two leading coordinates bounds the recovery error
        spread = np.median(np.abs(rows - np.median(rows, axis=2, keepdims=True)), axis=2).sum(axis=1)
        clear = (lead[:, 0] >= 0) & (first > 0) & (first - second > 2.0 * spread)
        results = []
        spare = self.requested
        for s in range(count):
            chosen = s
            while not clear[chosen]:
                if spare >= self.count:
                    chosen = None
                    break
                chosen = spare
                spare += 1
            if chosen is None:
                logger.warning("sampler %d found no dominant coordinate within the retry budget", s)
                results.append(None)
                continue
            item, copy = divmod(int(lead[chosen, 0]), self.duplication)
            e = self.exponentials(item)[chosen, copy]
            results.append((item, float(math.sqrt(e) * rows[chosen, 0].mean())))
        return results


def l2_sample(bank, count, state=None):
    return bank.sample(state, count)


class DiffEstimatorBlock:
    """Shared lifecycle: open (ingesting) -> split at t2 -> estimate."""

    kind = None

    def __init__(self, dimension, seed, orientation=FIXED_PREFIX, t1=0, instance_id=None):
        if orientation not in (FIXED_PREFIX, SUFFIX_PIVOTED):
            raise ParameterError(f"unknown orientation {orientation!r}")
        if dimension.kind != self.kind:
            raise ParameterError(f"{type(self).__name__} needs a {self.kind} dimension, got {dimension.kind}")
        self.dimension = dimension
        self.seed = seed
        self.orientation = orientation
        self.t1 = t1
        self.t2 = None
        self.instance_id = instance_id or seed.label
        self.registration = None

    @property
    def gamma(self):
        return self.dimension.gamma

    @property
    def eps(self):
        return self.dimension.eps

    @property
    def is_split(self):
        return self.t2 is not None

    def split(self, t):
        if self.is_split:
            raise ParameterError(f"block {self.instance_id} was already split at t={self.t2}")
        self.t2 = t
        self._freeze()

    def restart(self, t):
        """Fixed-prefix blocks: move the split to t, keeping the sketch of the stream so far."""
        self.t2 = None
        self.split(t)

    def estimate(self):
        if not self.is_split:
            return 0.0
        return self._estimate()

    def pivot_value(self):
        raise NotImplementedError

    def suffix_moment(self):
        raise NotImplementedError


class _LinearBlock(DiffEstimatorBlock):
    def __init__(self, dimension, seed, orientation=FIXED_PREFIX, t1=0, instance_id=None, sketch=None):
        super().__init__(dimension, seed, orientation, t1, instance_id)
        self.live = sketch if sketch is not None else self._new_sketch()
        self.frozen = None

    @property
    def rows(self):
        return self.live.rows

    def update(self, item, delta=1):
        self.live.update(item, delta)

    def _freeze(self):
        self.frozen = self.live.snapshot()
        if self.orientation == SUFFIX_PIVOTED:
            self.live.y[:] = 0.0

    def suffix_moment(self):
        if not self.is_split:
            return 0.0
        w = self.live.y - self.frozen.y if self.orientation == FIXED_PREFIX else self.live.y
        return self._moment(w)


class F2Block(_LinearBlock):
    kind = "F2"

    def _new_sketch(self):
        return SignSketch(self.dimension.rows(), self.seed)

    def _moment(self, y):
        return float(y @ y)

    def _estimate(self):
        if self.orientation == FIXED_PREFIX:
            return f2_fixed_difference(self.frozen.y, self.live.y)
        return f2_suffix_difference(self.frozen.y, self.live.y)

    def pivot_value(self):
        return f2_estimate(self.frozen, groups=1)


class FpSmallBlock(_LinearBlock):
    kind = "FpSmall"

    def _new_sketch(self):
        return StableSketch(self.dimension.rows(), self.dimension.p, self.seed)

    def _groups(self):
        # median-of-means only for small failure probabilities
        return max(1, math.ceil(math.log(1.0 / self.dimension.delta))) if self.dimension.delta < 0.1 else 1

    def _moment(self, y):
        return float(li_terms(y, self.live.p, self.live.q).mean())

    def _estimate(self):
        p, q = self.live.p, self.live.q
        if self.orientation == FIXED_PREFIX:
            return li_difference(self.frozen.y, self.live.y, p, q, self._groups())
        return li_difference(self.live.y, self.live.y + self.frozen.y, p, q, self._groups())

    def pivot_value(self):
        return li_fp_estimate(self.frozen, groups=1)


class F0Block(DiffEstimatorBlock):
    """
    Level sample frozen at the split; counts post-split survivors at the frozen
    level. A fixed-prefix block whose survivors outgrow the capacity moves one
    level up and keeps only the survivors of the new level.
    """

    kind = "F0"

    def __init__(self, dimension, seed, orientation=FIXED_PREFIX, t1=0, instance_id=None):
        super().__init__(dimension, seed, orientation, t1, instance_id)
        self.live = F0Sketch(dimension.rows(), seed, dimension.universe)
        self.level = None
        self.pivot = None
        self.pivots = {}
        self.tracked = {}
        self._pivot_estimate = 0.0

    @property
    def rows(self):
        return self.live.capacity

    def update(self, item, delta=1):
        self.live.update(item, delta)
        if not self.is_split:
            return
        level = self.live.item_level(item)
        if level < self.level:
            return
        fp = self.live.fingerprint(item)
        if self.orientation == FIXED_PREFIX:
            if fp not in self.pivot:
                self.tracked[fp] = level
                if len(self.tracked) > self.live.capacity:
                    self._raise_level()
        elif fp in self.pivot:
            self.tracked[fp] = level

    def _raise_level(self):
        if self.level + 1 >= self.live.max_levels:
            return
        self.level += 1
        self.pivot = self.pivots.get(self.level, frozenset())
        self.tracked = {fp: lv for fp, lv in self.tracked.items() if lv >= self.level}
        logger.debug("block %s raised its survivor level to %d", self.instance_id, self.level)

    def _freeze(self):
        self._pivot_estimate = f0_estimate(self.live)
        self.level = self.live.level_for_count(self.live.capacity)
        self.pivots = {k: frozenset(self.live.levels[k]) for k in range(self.level, self.live.max_levels)}
        self.pivot = self.pivots[self.level]
        self.tracked = {}

    def _estimate(self):
        if self.orientation == FIXED_PREFIX:
            return float(2 ** self.level * len(self.tracked))
        return float(2 ** self.level * (len(self.pivot) - len(self.tracked)))

    def pivot_value(self):
        return self._pivot_estimate

    def suffix_moment(self):
        if not self.is_split:
            return 0.0
        return float(2 ** self.level * len(self.tracked))


class FpLargeBlock(DiffEstimatorBlock):
    """
    Integer p > 2. With X the small vector and Y the large one,
    F(X + Y) - F(Y) = sum_a sum_{k=1}^{p-1} C(p,k) X_a^k Y_a^(p-k) + F(X).
    Heavy coordinates of Y are handled directly; the light remainder is estimated
    by importance weighting L2 samples of Y - h.
    """

    kind = "FpLarge"

    def __init__(self, dimension, seed, orientation=FIXED_PREFIX, t1=0, instance_id=None, tracker=None, samplers=None):
        super().__init__(dimension, seed, orientation, t1, instance_id)
        p = dimension.p
        if int(p) != p or not (3 <= p <= 8):
            raise ParameterError(f"large-moment blocks need integer p in [3, 8], got {p}")
        if dimension.universe is None:
            raise ParameterError("large-moment blocks need a declared universe")
        self.p = int(p)
        self.tracker = tracker or FpLargeTracker(self.p, dimension.eps, dimension.universe, derive_seed(seed, "tracker"))
        self.samplers = samplers or L2SamplerBank(dimension.rows(), derive_seed(seed, "sampler"), dimension.universe)
        self.sample_count = min(dimension.rows(), self.samplers.requested)
        self.frozen_tracker = None
        self.frozen_samplers = None
        self.exact = {}
        self.heavy = {}
        self.samples = []
        self.light_mass = 0.0

    @property
    def rows(self):
        return self.tracker.rows + self.sample_count

    def heavy_threshold(self, fp_value):
        gamma = self.dimension.gamma
        return self.dimension.eps / (16.0 * gamma ** (1.0 - 1.0 / self.p)) * fp_value ** (1.0 / self.p)

    def heavy_capacity(self):
        gamma = self.dimension.gamma
        return math.ceil(4.0 * (16.0 * gamma ** (1.0 - 1.0 / self.p) / self.dimension.eps) ** self.p)

    def update(self, item, delta=1):
        self.tracker.update(item, delta)
        self.samplers.update(item, delta)
        if self.is_split and self.orientation == FIXED_PREFIX and item in self.exact:
            self.exact[item] += delta

    def decompose(self, tracker_state, sampler_state):
        """Heavy set with estimates, light samples and the light L2 mass of a large vector."""
        estimates = self.tracker.point_estimates(tracker_state)
        fp_value = self.tracker.estimate(tracker_state)
        threshold = self.heavy_threshold(fp_value)
        heavy_items = np.nonzero(np.abs(estimates) >= max(threshold, 0.5))[0]
        if heavy_items.size > self.heavy_capacity():
            raise CapacityError(f"heavy set of {heavy_items.size} exceeds capacity {self.heavy_capacity()}")
        heavy = {int(a): float(estimates[a]) for a in heavy_items}
        light_state = self.samplers.remove(sampler_state, list(heavy), list(heavy.values()))
        samples = []
        for drawn in self.samplers.sample(light_state, self.sample_count):
            if drawn is None:
                samples.append(None)
                continue
            if drawn[0] in heavy:
                # the residual of a heavy coordinate carries no light mass
                samples.append((drawn[0], None))
                continue
            item = drawn[0]
            samples.append((item, max(abs(float(estimates[item])), 1.0)))
        light = estimates.copy()
        light[heavy_items] = 0.0
        return heavy, samples, float(light @ light)

    def _freeze(self):
        self.frozen_tracker = self.tracker.state.copy()
        self.frozen_samplers = self.samplers.state.copy()
        if self.orientation == FIXED_PREFIX:
            self.heavy, self.samples, self.light_mass = self.decompose(self.frozen_tracker, self.frozen_samplers)
            self.exact = {a: 0.0 for a in self.heavy}
            for drawn in self.samples:
                if drawn is not None and drawn[1] is not None:
                    self.exact.setdefault(drawn[0], 0.0)
        else:
            self.tracker.state[:] = 0.0
            self.samplers.state[:] = 0.0

    def combine(self, small_of, heavy, samples, light_mass, small_fp):
        heavy_part = sum(binomial_cross_terms(self.p, small_of(a), h) for a, h in heavy.items())
        trials = [s for s in samples if s is not None]
        light_part = 0.0
        if trials:
            light_part = sum(
                light_mass * binomial_cross_terms(self.p, small_of(a), big, shift=2)
                for a, big in trials
                if big is not None
            ) / len(trials)
        return heavy_part + light_part + small_fp

    def _estimate(self):
        if self.orientation == FIXED_PREFIX:
            small_fp = self.tracker.estimate(self.tracker.state - self.frozen_tracker)
            return self.combine(lambda a: self.exact[a], self.heavy, self.samples, self.light_mass, small_fp)
        heavy, samples, light_mass = self.decompose(self.tracker.state, self.samplers.state)
        pivot = self.tracker.point_estimates(self.frozen_tracker)
        small_fp = self.tracker.estimate(self.frozen_tracker)
        return self.combine(lambda a: float(pivot[a]), heavy, samples, light_mass, small_fp)

    def pivot_value(self):
        return self.tracker.estimate(self.frozen_tracker)

    def suffix_moment(self):
        if not self.is_split:
            return 0.0
        if self.orientation == FIXED_PREFIX:
            return self.tracker.estimate(self.tracker.state - self.frozen_tracker)
        return self.tracker.estimate()


BLOCK_TYPES = {"F0": F0Block, "F2": F2Block, "FpSmall": FpSmallBlock, "FpLarge": FpLargeBlock}


def new_block(dimension, seed, orientation=FIXED_PREFIX, t1=0, instance_id=None):
    return BLOCK_TYPES[dimension.kind](dimension, seed, orientation, t1, instance_id)


def _check_kind(block, kind):
    if block.kind != kind:
        raise ParameterError(f"expected a {kind} block, got {block.kind}")


def de_f2(block):
    _check_kind(block, "F2")
    return block.estimate()


def de_f0(block):
    _check_kind(block, "F0")
    return block.estimate()


def de_fp_small(block):
    _check_kind(block, "FpSmall")
    return block.estimate()


def de_fp_large(block):
    _check_kind(block, "FpLarge")
    return block.estimate()


@dataclass(frozen=True)
class RatioAssignment:
    gamma: float
    ratio: float
    level: int
    registered_at: int


def suffix_register(block, current_suffix_value, t=None):
    """
    Check min(F(u), F(u+v) - F(v)) <= gamma * F(v) for pivot u and current suffix
    value F(v); on success the block stays valid for every later suffix.
    """
    if block.orientation != SUFFIX_PIVOTED:
        raise ParameterError("only suffix-pivoted blocks are registered")
    if not block.is_split:
        raise ParameterError("a block is registered after its pivot is split off")
    observed = min(block.pivot_value(), max(block.estimate(), 0.0))
    if observed > block.gamma * current_suffix_value:
        raise RegistrationError(
            f"block {block.instance_id}: min(F(u), diff)={observed:.4g} exceeds "
            f"gamma*F(v)={block.gamma * current_suffix_value:.4g}"
        )
    ratio = observed / current_suffix_value if current_suffix_value > 0 else 0.0
    level = 0 if ratio <= 0 else max(0, min(64, int(math.floor(-math.log2(ratio)))))
    block.registration = RatioAssignment(block.gamma, ratio, level, t if t is not None else block.t2)
    logger.debug("registered %s at ratio %.4g (level %d)", block.instance_id, ratio, level)
    return block.registration
