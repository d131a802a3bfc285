"""
Sliding-window moments over the last W updates.

A SWHistogram opens a boundary at every update and keeps, per boundary, a
snapshot of the linear sketch state just before it. Pinned boundaries are
suffix starts, thinned by the smooth-histogram rule; every other boundary
lives on a ladder of levels and is merged away at level j once the block
around it is small against its suffix. A query takes the newest suffix that
covers the window and subtracts per-level suffix-pivoted differences up to the
window start. See docs/SLIDING_WINDOW.md.
"""

import bisect
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from diff_estimators import SUFFIX_PIVOTED, DEDimension, FpLargeBlock, L2SamplerBank, f2_suffix_difference, li_difference
from entropy import EntropySketch, entropy_rows, interpolate_entropy
from helpers import (
    DomainError,
    ParameterError,
    StreamFormatError,
    ceil_log2,
    check_delta,
    check_eps,
    config_value,
    constants_mode,
    practical_constant,
)
from rand_core import HashRows, Seed, derive_seed, stable_column
from sketches import FpLargeTracker, c_qp, li_terms

logger = logging.getLogger("Sliding")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SmoothSpec:
    tag: str
    p: float
    alpha: float
    beta: float


def smooth_params(p, eps=0.1):
    """(alpha, beta) smoothness of Fp: (eps, eps**p / p) for p >= 1, (eps, eps) below."""
    if p <= 0:
        raise ParameterError(f"smoothness is defined for p > 0, got {p}")
    check_eps(eps)
    if p >= 1:
        return eps, eps ** p / p
    return eps, eps


def smooth_spec(p, eps=0.1, tag=None):
    alpha, beta = smooth_params(p, eps)
    return SmoothSpec(tag or f"F{p:g}", float(p), alpha, beta)


@dataclass(frozen=True)
class SWParams:
    eps: float
    p: float = 2.0
    horizon: int = 1000
    delta: float = 0.1
    constants: str = None
    universe: int = None
    value_cap: float = None
    stream_length: int = 10 ** 6

    def __post_init__(self):
        check_eps(self.eps)
        check_delta(self.delta)
        large = int(self.p) == self.p and 3 <= self.p <= 8
        if not (0 < self.p <= 2 or large):
            raise ParameterError(f"sliding moments need p in (0, 2] or integer p in [3, 8], got {self.p}")
        if large and self.universe is None:
            raise ParameterError("large moments in a window need a declared universe")
        if self.horizon < 1:
            raise ParameterError(f"window horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "constants", constants_mode(self.constants))

    @property
    def q(self):
        return max(self.p, 1.0)

    @property
    def guess_mode(self):
        return self.p > 2

    @property
    def beta(self):
        if self.constants == "theory":
            return ceil_log2(100.0 * 4.0 ** self.q / self.eps ** self.q)
        return ceil_log2((4.0 / self.eps) ** self.q)

    @property
    def eta(self):
        if self.constants == "theory":
            return self.eps / (2.0 ** 20 * self.q * math.log2(1.0 / self.eps))
        return self.eps / float(config_value("de_accuracy_divisor", 8))

    def gamma(self, j):
        return min(1.0, 2.0 ** (3 - j))

    @property
    def shift(self):
        if self.constants == "theory":
            return 10
        return int(config_value("sliding_merge_shift", 2))

    @property
    def merge_ratio(self):
        if self.guess_mode:
            return 1.0 - 1.0 / 8.0 ** self.q
        if self.p < 1:
            return 0.9
        return 1.0 - 1.0 / 4.0 ** self.q

    @property
    def cap(self):
        if self.value_cap is not None:
            return float(self.value_cap)
        return float(self.stream_length) ** self.q

    @property
    def guess_count(self):
        return max(1, ceil_log2(self.cap)) if self.guess_mode else 1

    def block_cap(self, j, suffixes):
        if self.constants == "theory":
            return 100 * 2 ** (j + 10)
        return int(config_value("sliding_block_cap", 8)) * 2 ** (j + self.shift) * (suffixes + 1)

    def tracker_rows(self):
        eta = self.eps / float(config_value("tracker_accuracy_divisor", 4))
        return math.ceil(practical_constant() / eta ** 2)

    def level_rows(self, j):
        return min(self.tracker_rows(), math.ceil(practical_constant() * self.gamma(j) / self.eta ** 2))


class LinearFamily:
    """
    A linear sketch laid out as one flat state vector. `value` is the cheap
    estimate used for histogram upkeep, `estimate` the full-accuracy one and
    `difference(pivot, suffix, level)` estimates F(pivot + suffix) - F(suffix).
    """

    size = 0

    def update(self, state, item, delta):
        raise NotImplementedError

    def value(self, diffs, accuracy="merge"):
        raise NotImplementedError

    def estimate(self, diff):
        raise NotImplementedError

    def difference(self, pivot, suffix, level):
        raise NotImplementedError

    def _accuracy_rows(self, accuracy, limit, multiple=1):
        key = "sliding_rough_rows" if accuracy == "rough" else "sliding_merge_rows"
        rows = int(config_value(key, 64 if accuracy == "rough" else 1024))
        rows = multiple * math.ceil(rows / multiple)
        return min(rows, limit)


class SignLinear(LinearFamily):
    def __init__(self, params, seed):
        self.params = params
        self.d = params.tracker_rows()
        self.size = self.d
        self.hashes = HashRows.from_seed(derive_seed(seed, "sign"), rows=self.d, k=4)
        self.scale = 1.0 / math.sqrt(self.d)

    def update(self, state, item, delta):
        state += (delta * self.scale) * self.hashes.signs(item)

    def value(self, diffs, accuracy="merge"):
        r = self._accuracy_rows(accuracy, self.d)
        diffs = np.atleast_2d(diffs)
        return (diffs[:, :r] ** 2).sum(axis=1) * (self.d / r)

    def estimate(self, diff):
        return float(diff @ diff)

    def difference(self, pivot, suffix, level):
        r = self.params.level_rows(level)
        return f2_suffix_difference(pivot[:r], suffix[:r]) * (self.d / r)


class StableLinear(LinearFamily):
    def __init__(self, params, seed):
        self.params = params
        self.q = int(config_value("q", 3))
        self.p = float(params.p)
        self.d = self._round(params.tracker_rows())
        self.size = self.d
        self.seed = derive_seed(seed, "stable")

    def _round(self, rows):
        return self.q * max(1, math.ceil(rows / self.q))

    def update(self, state, item, delta):
        state += delta * stable_column(self.seed, int(item), self.d, self.p)

    def value(self, diffs, accuracy="merge"):
        r = self._accuracy_rows(accuracy, self.d, self.q)
        diffs = np.atleast_2d(diffs)[:, :r]
        groups = np.abs(diffs).reshape(diffs.shape[0], -1, self.q) ** (self.p / self.q)
        return c_qp(self.q, self.p) * np.prod(groups, axis=2).mean(axis=1)

    def estimate(self, diff):
        return float(li_terms(diff, self.p, self.q).mean())

    def difference(self, pivot, suffix, level):
        r = min(self.d, self._round(self.params.level_rows(level)))
        return li_difference(suffix[:r], suffix[:r] + pivot[:r], self.p, self.q)


class FpLargeLinear(LinearFamily):
    """Level-set tracker plus a shared L2 sampler bank; one engine block per level."""

    def __init__(self, params, seed):
        self.params = params
        self.p = int(params.p)
        n = params.universe
        tracker_eps = params.eps / float(config_value("tracker_accuracy_divisor", 4))
        self.tracker = FpLargeTracker(self.p, tracker_eps, n, derive_seed(seed, "tracker"))
        spread = n ** (1.0 - 2.0 / self.p)
        counts = [max(1, math.ceil(params.gamma(j) * spread / params.eps ** 2)) for j in range(1, params.beta + 1)]
        self.samplers = L2SamplerBank(max(counts), derive_seed(seed, "sampler"), n)
        self.split = self.tracker.size
        self.size = self.tracker.size + self.samplers.size
        self.engines = {
            j: FpLargeBlock(
                DEDimension("FpLarge", params.gamma(j), min(params.eps, 0.5), params.delta, self.p, n, rows_override=count),
                derive_seed(seed, f"engine{j}"),
                SUFFIX_PIVOTED,
                tracker=self.tracker,
                samplers=self.samplers,
            )
            for j, count in enumerate(counts, start=1)
        }

    def update(self, state, item, delta):
        flat, signs = self.tracker._locate(int(item))
        state[flat] += delta * signs
        flat, weights = self.samplers.placement(int(item))
        np.add.at(state[self.split:], flat, delta * weights)

    def value(self, diffs, accuracy="merge"):
        return self.tracker.estimate_many(np.atleast_2d(diffs)[:, :self.split])

    def estimate(self, diff):
        return self.tracker.estimate(diff[:self.split])

    def difference(self, pivot, suffix, level):
        if not np.any(pivot):
            return 0.0
        engine = self.engines[min(level, len(self.engines))]
        heavy, samples, light_mass = engine.decompose(suffix[:self.split], suffix[self.split:])
        small = self.tracker.point_estimates(pivot[:self.split])
        small_fp = self.tracker.estimate(pivot[:self.split])
        return engine.combine(lambda a: float(small[a]), heavy, samples, light_mass, small_fp)

    def point(self, diff, item):
        flat, signs = self.tracker._locate(int(item))
        r = self.tracker.r
        return float(np.median(signs[:r] * diff[flat[:r]]))

    def l2(self, diff):
        table = diff[:self.tracker.r * self.tracker.b].reshape(self.tracker.r, self.tracker.b)
        return math.sqrt(float(np.median((table ** 2).sum(axis=1))))


class EntropyLinear(LinearFamily):
    """Stable rows at every entropy node plus the F1 anchor; upkeep follows the anchor."""

    def __init__(self, params, seed, ys=None):
        self.params = params
        self.sketch = EntropySketch(params.eps, derive_seed(seed, "entropy"), ys=ys, rows=entropy_rows(params.eps),
                                    stream_length=params.stream_length, mode=params.constants)
        self.ys = self.sketch.ys
        self.q = self.sketch.q
        self.d = self.sketch.d
        self.nodes = self.sketch.powers.size
        self.size = self.nodes * self.d

    def update(self, state, item, delta):
        state += delta * self.sketch.column(item).ravel()

    def value(self, diffs, accuracy="merge"):
        r = self._accuracy_rows(accuracy, self.d, self.q)
        anchor = np.atleast_2d(diffs)[:, (self.nodes - 1) * self.d:(self.nodes - 1) * self.d + r]
        groups = np.abs(anchor).reshape(anchor.shape[0], -1, self.q) ** (1.0 / self.q)
        return c_qp(self.q, 1.0) * np.prod(groups, axis=2).mean(axis=1)

    def estimate(self, diff):
        return self.sketch.moments(diff)

    def difference(self, pivot, suffix, level):
        pivot = pivot.reshape(self.nodes, self.d)
        suffix = suffix.reshape(self.nodes, self.d)
        return np.array([
            li_difference(suffix[i], suffix[i] + pivot[i], float(p), self.q) for i, p in enumerate(self.sketch.powers)
        ])


def default_family(params, seed, entropy=False):
    if entropy:
        return EntropyLinear(params, seed)
    if params.p == 2:
        return SignLinear(params, seed)
    if params.p <= 2:
        return StableLinear(params, seed)
    return FpLargeLinear(params, seed)


class Boundary:
    __slots__ = ("time", "snap", "pinned", "top")

    def __init__(self, time, snap, pinned, top):
        self.time = time
        self.snap = snap
        self.pinned = pinned
        self.top = top


class SWHistogram:
    """
    `top[g]` is the coarsest level at which a boundary still splits blocks for
    guess g (1 = every level); past `params.beta` it splits nothing and an
    unpinned boundary is dropped.

    Under value guesses the merge thresholds are fixed, and a pinned boundary
    resets the left neighbour of the pass, so only the gaps around a newly
    unpinned suffix are re-examined after an update. Below p = 2 thresholds
    follow the suffix values and every pass covers the whole histogram.
    """

    def __init__(self, params, family=None, seed=None, entropy=False):
        seed = seed if seed is not None else Seed.parse(config_value("seed", "0"))
        self.params = params
        self.seed = seed
        self.family = family or default_family(params, seed, entropy)
        self.t = 0
        self.state = np.zeros(self.family.size)
        self.boundaries = []
        self.alive = np.ones(params.guess_count, dtype=bool)
        self.heavy = {}
        self._spans = {}
        self._suffix_values = {}
        self._reopened = []
        self._expired = False
        self._flat = np.zeros(params.guess_count, dtype=bool)

    @property
    def suffixes(self):
        return [b for b in self.boundaries if b.pinned]

    def _suffix_value(self, boundary):
        key = boundary.time
        if key not in self._suffix_values:
            pending = [b for b in self.boundaries if b.pinned and b.time not in self._suffix_values]
            if boundary not in pending:
                pending.append(boundary)
            chunk = int(config_value("sliding_value_chunk", 32))
            for start in range(0, len(pending), chunk):
                batch = pending[start:start + chunk]
                values = self.family.value(self.state - np.stack([b.snap for b in batch]), "merge")
                self._suffix_values.update((b.time, float(v)) for b, v in zip(batch, values))
        return self._suffix_values[key]

    def _span(self, left, right):
        key = (left.time, right.time)
        if key not in self._spans:
            self._spans[key] = float(self.family.value(right.snap - left.snap, "rough")[0])
        return self._spans[key]

    def ingest(self, item, delta=1):
        if delta < 0:
            raise DomainError("sliding windows take insertion-only updates")
        if int(item) != item or item < 0:
            raise DomainError(f"items are nonnegative integers, got {item}")
        if self.params.universe is not None and item >= self.params.universe:
            raise DomainError(f"item {item} outside universe [0, {self.params.universe})")
        self.t += 1
        top = np.ones(self.params.guess_count, dtype=int)
        self.boundaries.append(Boundary(self.t, self.state.copy(), True, top))
        self.family.update(self.state, int(item), delta)
        self._suffix_values = {}
        self._reopened = []
        self._expired = False
        if self.params.guess_mode:
            self._track_heavy(int(item), delta)
        self._merge_suffixes()
        self._expire()
        for g in np.nonzero(self.alive)[0]:
            self._merge_blocks(int(g))
        self._drop_unused()

    def _track_heavy(self, item, delta):
        fraction = float(config_value("sliding_heavy_fraction", 0.25))
        if item not in self.heavy:
            diff = self.state - self.boundaries[0].snap
            if self.family.point(diff, item) < fraction * self.family.l2(diff):
                return
            self.heavy[item] = []
            logger.debug("item %d flagged heavy at t=%d", item, self.t)
        self.heavy[item].append((self.t, delta))

    def _merge_suffixes(self):
        ratio = self.params.merge_ratio
        suffixes = self.suffixes
        i = 0
        while i + 2 < len(suffixes):
            if self._suffix_value(suffixes[i + 2]) >= ratio * self._suffix_value(suffixes[i]):
                suffixes[i + 1].pinned = False
                self._reopened.append(suffixes[i + 1])
                logger.debug("suffix at t=%d merged at t=%d", suffixes[i + 1].time, self.t)
                del suffixes[i + 1]
            else:
                i += 1

    def _expire(self):
        oldest_start = self.t - self.params.horizon + 1
        keep = None
        for index, boundary in enumerate(self.boundaries):
            if boundary.pinned and boundary.time <= oldest_start:
                keep = index
        if keep:
            del self.boundaries[:keep]
            self._expired = True
            times = {b.time for b in self.boundaries}
            self._reopened = [b for b in self._reopened if b.time in times]
            self._spans = {k: v for k, v in self._spans.items() if k[0] in times and k[1] in times}
            self.heavy = {
                item: [(t, d) for t, d in records if t >= self.boundaries[0].time] for item, records in self.heavy.items()
            }

    def _threshold(self, g, j, suffix):
        if self.params.guess_mode:
            return self.params.cap / 2.0 ** (g + j + self.params.shift)
        return 2.0 ** (-j - self.params.shift) * self._suffix_value(suffix)

    def _dirty_ranges(self):
        """Index ranges from the pinned boundary before each reopened suffix to the pinned one after it."""
        if not self._reopened:
            return []
        pinned = [i for i, b in enumerate(self.boundaries) if b.pinned]
        position = {b.time: i for i, b in enumerate(self.boundaries)}
        ranges = []
        for boundary in self._reopened:
            i = position[boundary.time]
            k = bisect.bisect_left(pinned, i)
            ranges.append((pinned[k - 1], pinned[k]))
        ranges.sort()
        merged = [ranges[0]]
        for lo, hi in ranges[1:]:
            if lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(hi, merged[-1][1]))
            else:
                merged.append((lo, hi))
        return merged

    def _merge_level(self, g, j, lo, hi):
        members = [b for b in self.boundaries[lo:hi + 1] if b.top[g] <= j]
        prev = None
        suffix = None
        for index, boundary in enumerate(members):
            if boundary.pinned:
                suffix = boundary
                prev = boundary
                continue
            following = members[index + 1] if index + 1 < len(members) else None
            if prev is None or following is None or boundary.top[g] != j:
                prev = boundary
                continue
            threshold = self._threshold(g, j, suffix)
            if self.params.p < 1 and not self.params.guess_mode:
                merged = self._suffix_value(prev) - self._suffix_value(following) <= threshold
            else:
                merged = self._span(prev, following) <= threshold
            if merged:
                boundary.top[g] = j + 1
            else:
                prev = boundary

    def _flatten(self, g, boundaries):
        for boundary in boundaries:
            if not boundary.pinned:
                boundary.top[g] = self.params.beta + 1

    def _merge_blocks(self, g):
        beta = self.params.beta
        if not self.params.guess_mode:
            for j in range(1, beta + 1):
                self._merge_level(g, j, 0, len(self.boundaries) - 1)
            return
        if not self.boundaries:
            return
        whole = self._suffix_value(self.boundaries[0])
        if whole <= self.params.cap / 2.0 ** (g + beta + self.params.shift):
            self._flatten(g, self._reopened if self._flat[g] else self.boundaries)
            self._flat[g] = True
            return
        self._flat[g] = False
        ranges = self._dirty_ranges()
        if not ranges and not self._expired:
            return
        for j in range(1, beta + 1):
            for lo, hi in ranges:
                self._merge_level(g, j, lo, hi)
        tops = np.fromiter((b.top[g] for b in self.boundaries), dtype=int, count=len(self.boundaries))
        suffixes = sum(1 for b in self.boundaries if b.pinned)
        for j in range(1, beta + 1):
            if int(np.count_nonzero(tops <= j)) > self.params.block_cap(j, suffixes):
                self.alive[g] = False
                logger.debug("guess %d saturated at level %d (t=%d)", g, j, self.t)
                self._flatten(g, self.boundaries)
                return

    def _drop_unused(self):
        beta = self.params.beta
        live = self.alive
        self.boundaries = [b for b in self.boundaries if b.pinned or np.any(b.top[live] <= beta)]

    def _pick_guess(self, anchor):
        if not self.params.guess_mode:
            return 0
        value = self._suffix_value(anchor)
        for g in range(self.params.guess_count):
            if self.alive[g] and self.params.cap / 2.0 ** g <= value:
                return g
        alive = np.nonzero(self.alive)[0]
        if alive.size == 0:
            raise ParameterError("every value guess saturated; raise value_cap or sliding_block_cap")
        return int(alive[-1])

    def query(self, W):
        return self.query_report(W)["estimate"]

    def query_report(self, W):
        if not (1 <= W <= self.params.horizon):
            raise ParameterError(f"window must lie in [1, {self.params.horizon}], got {W}")
        if not self.boundaries:
            return {"estimate": 0.0, "window": W, "t": self.t, "levels": []}
        start = self.t - W + 1
        anchor_index = None
        for index, boundary in enumerate(self.boundaries):
            if boundary.pinned and boundary.time <= start:
                anchor_index = index
        if anchor_index is None:
            anchor_index = 0
        anchor = self.boundaries[anchor_index]
        x = self.family.estimate(self.state - anchor.snap)
        report = {"window": W, "t": self.t, "suffix": anchor.time, "guess": 0, "x": _jsonable(x), "levels": []}
        if anchor.time >= start:
            report["estimate"] = x
            return report
        g = self._pick_guess(anchor)
        report["guess"] = g
        total = x
        cut = anchor_index
        for j in range(1, self.params.beta + 1):
            chain = [i for i in range(cut, len(self.boundaries))
                     if self.boundaries[i].time <= start and self.boundaries[i].top[g] <= j]
            level = {"level": j, "boundaries": [self.boundaries[i].time for i in chain], "differences": []}
            for left, right in zip(chain, chain[1:]):
                pivot = self.boundaries[right].snap - self.boundaries[left].snap
                y = self.family.difference(pivot, self.state - self.boundaries[right].snap, j)
                total = total - y
                level["differences"].append(_jsonable(y))
            report["levels"].append(level)
            cut = chain[-1]
        if self.params.guess_mode:
            correction = self._heavy_correction(self.boundaries[cut].time, start)
            report["heavy_correction"] = correction
            total = total - correction
        report["estimate"] = total
        report["active_blocks"] = max((len(level["differences"]) for level in report["levels"]), default=0)
        return report

    def _heavy_correction(self, block_start, window_start):
        p = self.params.p
        total = 0.0
        for records in self.heavy.values():
            g = sum(d for t, d in records if t >= block_start)
            h = sum(d for t, d in records if t >= window_start)
            total += float(g) ** p - float(h) ** p
        return total

    def save(self, path):
        header = {
            "version": CHECKPOINT_VERSION,
            "t": self.t,
            "params": {k: getattr(self.params, k) for k in self.params.__dataclass_fields__},
            "seed": self.seed.value,
            "family": type(self.family).__name__,
            "alive": self.alive.tolist(),
            "heavy": {str(item): records for item, records in self.heavy.items()},
        }
        np.savez_compressed(
            path,
            header=np.array(json.dumps(header)),
            state=self.state,
            times=np.array([b.time for b in self.boundaries], dtype=np.int64),
            pinned=np.array([b.pinned for b in self.boundaries], dtype=bool),
            tops=np.array([b.top for b in self.boundaries], dtype=np.int64).reshape(len(self.boundaries), -1),
            snaps=np.array([b.snap for b in self.boundaries]).reshape(len(self.boundaries), -1),
        )

    @classmethod
    def load(cls, path, family=None, entropy=False):
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("version") != CHECKPOINT_VERSION:
                raise StreamFormatError(f"unsupported checkpoint version {header.get('version')}")
            params = SWParams(**header["params"])
            hist = cls(params, family, Seed(header["seed"]), entropy)
            if hist.family.size != data["state"].size:
                raise StreamFormatError("checkpoint state does not match the sketch family")
            hist.t = header["t"]
            hist.state = data["state"].copy()
            hist.alive = np.array(header["alive"], dtype=bool)
            hist.heavy = {int(item): [tuple(r) for r in records] for item, records in header["heavy"].items()}
            hist.boundaries = [
                Boundary(int(t), snap.copy(), bool(pinned), top.copy())
                for t, snap, pinned, top in zip(data["times"], data["snaps"], data["pinned"], data["tops"])
            ]
        return hist


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    return float(value)


def new_histogram(params, seed=None, family=None, entropy=False):
    return SWHistogram(params, family, seed, entropy)


def sw_ingest(hist, update):
    item, delta = update
    hist.ingest(item, delta)


def sw_query(hist, W):
    return hist.query(W)


def sw_fp_small(hist, updates=(), W=None):
    if hist.params.p > 2:
        raise ParameterError("sw_fp_small covers p in (0, 2]")
    for update in updates:
        sw_ingest(hist, update)
    return hist.query(W if W is not None else hist.params.horizon)


def sw_fp_large(hist, W):
    if not hist.params.guess_mode:
        raise ParameterError("sw_fp_large covers integer p in [3, 8]")
    return hist.query(W)


def sw_entropy(hist, W):
    if not isinstance(hist.family, EntropyLinear):
        raise ParameterError("sw_entropy needs a histogram built with entropy=True")
    moments = np.asarray(hist.query(W), dtype=float)
    if moments[-1] <= 0:
        return 0.0
    return interpolate_entropy(hist.family.ys, moments[:-1], moments[-1])
