"""
Exact brute-force ground truth over update logs.

A log is a sequence of (item, delta) pairs; positions are 1-indexed and ranges
are inclusive, so `exact_moment(log, 2, 3, 7)` covers updates 3..7. p = 0 is
the support size. Everything here is quadratic or worse and meant for streams
that fit comfortably in memory.
"""

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import entropy as shannon_entropy

from helpers import CapacityError, DomainError, ParameterError, check_eps, config_value
from robust_framework import SubEstimatorFamily
from sliding_window import LinearFamily

logger = logging.getLogger("Oracle")


def _slice(log, start=1, end=None):
    end = len(log) if end is None else end
    if start < 1 or end < start - 1:
        raise ParameterError(f"range [{start}, {end}] is not a valid 1-indexed range")
    return log[start - 1:end]


def frequencies(log, start=1, end=None):
    counts = Counter()
    for item, delta in _slice(log, start, end):
        counts[int(item)] += delta
    return {item: f for item, f in counts.items() if f != 0}


def power_sum(values, p):
    """Sum of |v|^p over nonzero values; exact integer arithmetic for integer p."""
    values = [v for v in values if v != 0]
    if p == 0:
        return float(len(values))
    if float(p).is_integer():
        return float(sum(abs(int(v)) ** int(p) for v in values))
    return float(np.sum(np.abs(np.asarray(values, dtype=float)) ** p))


def exact_moment(log, p, start=1, end=None):
    return power_sum(frequencies(log, start, end).values(), p)


def exact_entropy(log, start=1, end=None):
    """Shannon entropy in bits of the empirical distribution of the range."""
    counts = np.abs(np.fromiter(frequencies(log, start, end).values(), dtype=float))
    if counts.size == 0 or counts.sum() == 0:
        raise DomainError(f"entropy of the empty range [{start}, {end}] is undefined")
    return float(shannon_entropy(counts, base=2))


def exact_heavy_hitters(log, eps, start=1, end=None):
    """Items with |f_i| >= eps * L2, heaviest first."""
    freqs = frequencies(log, start, end)
    l2 = math.sqrt(power_sum(freqs.values(), 2))
    heavy = [(item, f) for item, f in freqs.items() if abs(f) >= eps * l2]
    return sorted(heavy, key=lambda pair: (-abs(pair[1]), pair[0]))


def prefix_moments(log, p):
    """F(1:t) for t = 0..m."""
    counts = Counter()
    total = 0.0
    out = [0.0]
    for item, delta in log:
        old = counts[item]
        counts[item] = old + delta
        total += _power(counts[item], p) - _power(old, p)
        out.append(total)
    return out


def _power(v, p):
    if v == 0:
        return 0
    if p == 0:
        return 1
    if float(p).is_integer():
        return abs(int(v)) ** int(p)
    return abs(v) ** p


class ExactState:
    """Full frequency map plus the timestamped update log it was replayed from."""

    def __init__(self, insertion_only=True):
        self.insertion_only = insertion_only
        self.counts = Counter()
        self.log = []

    @property
    def t(self):
        return len(self.log)

    def update(self, item, delta=1):
        if self.insertion_only and delta < 0:
            raise DomainError("negative delta on an insertion-only exact state")
        self.counts[int(item)] += delta
        self.log.append((int(item), delta))

    def moment(self, p, start=1, end=None):
        if start == 1 and end is None:
            return power_sum(self.counts.values(), p)
        return exact_moment(self.log, p, start, end)

    def window_moment(self, p, W):
        return self.moment(p, max(1, self.t - W + 1))

    def entropy(self, start=1, end=None):
        return exact_entropy(self.log, start, end)


def _flips(prev, cur, eps):
    return not ((1.0 - eps) * cur <= prev <= (1.0 + eps) * cur)


def flip_number(values, eps):
    """
    Longest chain i_1 < ... < i_k with each v_{i_{j-1}} outside
    [(1-eps) v_{i_j}, (1+eps) v_{i_j}]. Longest-chain DP; the greedy left-to-right
    scan can undercount.
    """
    check_eps(eps)
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return 0
    best = np.ones(v.size, dtype=int)
    for j in range(1, v.size):
        prev = v[:j]
        ok = (prev < (1.0 - eps) * v[j]) | (prev > (1.0 + eps) * v[j])
        if ok.any():
            best[j] = best[:j][ok].max() + 1
    return int(best.max())


def flip_number_greedy(values, eps):
    chain = []
    for value in values:
        if not chain or _flips(chain[-1], value, eps):
            chain.append(value)
    return len(chain)


def flip_number_exhaustive(values, eps):
    limit = int(config_value("twist_exhaustive_limit", 12))
    if len(values) > limit:
        raise CapacityError(f"exhaustive flip search is capped at {limit} values, got {len(values)}")
    for k in range(len(values), 0, -1):
        for chain in itertools.combinations(values, k):
            if all(_flips(a, b, eps) for a, b in zip(chain, chain[1:])):
                return k
    return 0


@dataclass(frozen=True)
class TwistResult:
    value: int
    method: str
    verified: bool = False

    def __int__(self):
        return self.value


def _substream_moments(log, p):
    """span[i][j] = F of updates i+1..j, for 0 <= i < j <= m."""
    m = len(log)
    span = np.zeros((m + 1, m + 1))
    for i in range(m):
        counts = Counter()
        total = 0.0
        for j in range(i + 1, m + 1):
            item, delta = log[j - 1]
            old = counts[item]
            counts[item] = old + delta
            total += _power(counts[item], p) - _power(old, p)
            span[i, j] = total
    return span


def _twist_link(prefix, span, i, j, eps):
    return _flips(prefix[i], prefix[j], eps) or span[i, j] >= eps * prefix[i]


def _twist_exhaustive(prefix, span, eps):
    positions = range(len(prefix))
    for k in range(len(prefix), 0, -1):
        for chain in itertools.combinations(positions, k):
            if all(_twist_link(prefix, span, a, b, eps) for a, b in zip(chain, chain[1:])):
                return k
    return 0


def twist_number(log, p, eps, exhaustive=None):
    """
    Longest chain 0 <= i_1 < ... < i_k <= m of prefix positions where each link
    either flips the prefix value or its substream (updates i_{j-1}+1..i_j)
    carries at least eps of the earlier prefix value.

    Streams up to `twist_exhaustive_limit` are cross-checked by brute force;
    `exhaustive=True` on a longer stream raises CapacityError.
    """
    check_eps(eps)
    log = list(log)
    limit = int(config_value("twist_exhaustive_limit", 12))
    if exhaustive and len(log) > limit:
        raise CapacityError(f"exhaustive twist search is capped at m={limit}, got m={len(log)}")
    prefix = np.asarray(prefix_moments(log, p))
    span = _substream_moments(log, p)
    best = np.ones(len(prefix), dtype=int)
    for j in range(1, len(prefix)):
        prev = prefix[:j]
        ok = (prev < (1.0 - eps) * prefix[j]) | (prev > (1.0 + eps) * prefix[j]) | (span[:j, j] >= eps * prev)
        if ok.any():
            best[j] = best[:j][ok].max() + 1
    value = int(best.max())
    if exhaustive is False or len(log) > limit:
        return TwistResult(value, "dp")
    checked = _twist_exhaustive(prefix, span, eps)
    if checked != value:
        logger.warning("twist DP gave %d but exhaustive search gave %d", value, checked)
        return TwistResult(checked, "exhaustive", True)
    return TwistResult(value, "dp", True)


@dataclass(frozen=True)
class SmoothnessResult:
    passed: bool
    checked: int
    witness: dict = None


def _vectors(universe, length):
    rows = [v for v in itertools.product(range(length + 1), repeat=universe) if sum(v) <= length]
    rows.sort(key=sum)
    return np.array(rows, dtype=np.int64)


def _moments(vectors, p):
    if p == 0:
        return (vectors != 0).sum(axis=1)
    if float(p).is_integer():
        return (np.abs(vectors) ** int(p)).sum(axis=1)
    return (np.abs(vectors).astype(float) ** p).sum(axis=1)


def _at_most(left_scale, left, right, p):
    """(left_scale) * left <= right, exact for integer p."""
    if p == 0 or float(p).is_integer():
        frac = Fraction(left_scale).limit_denominator(10 ** 6)
        return frac.numerator * left <= frac.denominator * right
    return left_scale * left <= right * (1.0 + 1e-12)


def _as_stream(vector):
    return [item for item, count in enumerate(vector.tolist()) for _ in range(count)]


def smoothness_check(p, alpha, beta, universe=None, length=None):
    """
    Search every split A, B, C of micro-streams for a violation of
    (1-beta) F(A+B) <= F(B)  =>  (1-alpha) F(A+B+C) <= F(B+C).
    Streams are frequency vectors over `universe` items with total length at
    most `length`.
    """
    u_cap = int(config_value("smoothness_universe_limit", 6))
    l_cap = int(config_value("smoothness_length_limit", 8))
    universe = universe or min(3, u_cap)
    length = length or min(6, l_cap)
    if universe > u_cap or length > l_cap:
        raise CapacityError(f"smoothness search is capped at universe {u_cap} and length {l_cap}")
    if not (0 <= alpha < 1 and 0 <= beta < 1):
        raise ParameterError(f"alpha and beta must lie in [0, 1), got ({alpha}, {beta})")
    vecs = _vectors(universe, length)
    sizes = vecs.sum(axis=1)
    moments = _moments(vecs, p)
    checked = 0
    for ia, a in enumerate(vecs):
        room = length - sizes[ia]
        bs = vecs[sizes <= room]
        ab = _moments(a + bs, p)
        premise = _at_most(1.0 - beta, ab, moments[sizes <= room], p)
        for b in bs[premise]:
            cs = vecs[sizes <= room - b.sum()]
            lhs = _moments(a + b + cs, p)
            rhs = _moments(b + cs, p)
            holds = _at_most(1.0 - alpha, lhs, rhs, p)
            checked += cs.shape[0]
            if not holds.all():
                c = cs[int(np.argmin(holds))]
                witness = {"A": _as_stream(a), "B": _as_stream(b), "C": _as_stream(c)}
                logger.info("smoothness (%.4g, %.4g) fails for p=%g: %s", alpha, beta, p, witness)
                return SmoothnessResult(False, checked, witness)
    return SmoothnessResult(True, checked)


def moment_order(params):
    if params.kind == "F0":
        return 0
    if params.kind == "F2":
        return 2
    return params.p


class ExactTracker:
    """Exact F of everything it has seen; a drop-in for a sketch-backed tracker."""

    banked = False

    def __init__(self, p, instance_id):
        self.p = p
        self.instance_id = instance_id
        self.counts = Counter()

    @property
    def rows(self):
        return len(self.counts)

    def update(self, item, delta=1):
        self.counts[item] += delta

    def estimate(self):
        return power_sum(self.counts.values(), self.p)


class ExactBlock:
    """Fixed-prefix difference F(prefix + suffix) - F(prefix), computed exactly."""

    def __init__(self, p, instance_id, t1=0):
        self.p = p
        self.instance_id = instance_id
        self.t1 = t1
        self.t2 = None
        self.live = Counter()
        self.frozen = None

    @property
    def rows(self):
        return len(self.live)

    @property
    def is_split(self):
        return self.t2 is not None

    def update(self, item, delta=1):
        self.live[item] += delta

    def split(self, t):
        self.t2 = t
        self.frozen = Counter(self.live)

    def restart(self, t):
        self.split(t)

    def estimate(self):
        if not self.is_split:
            return 0.0
        return power_sum(self.live.values(), self.p) - power_sum(self.frozen.values(), self.p)

    def pivot_value(self):
        return power_sum(self.frozen.values(), self.p)

    def suffix_moment(self):
        if not self.is_split:
            return 0.0
        suffix = Counter(self.live)
        suffix.subtract(self.frozen)
        return power_sum(suffix.values(), self.p)


class OracleFamily(SubEstimatorFamily):
    """Exact trackers and blocks, so ledger traces depend only on the stream."""

    name = "oracle"

    def tracker(self, params, seed, instance_id):
        return ExactTracker(moment_order(params), instance_id)

    def block(self, params, level, seed, instance_id, t):
        return ExactBlock(moment_order(params), instance_id, t)


class ExactLinear(LinearFamily):
    """Dense frequency vector as the sliding-window state."""

    def __init__(self, params, seed=None):
        if params.universe is None:
            raise ParameterError("the exact window family needs a declared universe")
        self.p = params.p
        self.size = int(params.universe)

    def update(self, state, item, delta):
        state[item] += delta

    def value(self, diffs, accuracy="merge"):
        return np.atleast_2d(np.abs(diffs) ** self.p).sum(axis=1)

    def estimate(self, diff):
        return power_sum(np.rint(diff).astype(np.int64).tolist(), self.p)

    def difference(self, pivot, suffix, level):
        return self.estimate(pivot + suffix) - self.estimate(suffix)

    def point(self, diff, item):
        return float(diff[item])

    def l2(self, diff):
        return float(np.linalg.norm(diff))


def exact_oracle(log=()):
    state = ExactState(insertion_only=all(delta >= 0 for _, delta in log))
    for item, delta in log:
        state.update(item, delta)
    return state
