"""
Adversarially robust moment estimation by sketch switching and stitching.

A RobustLedger publishes (1 + b*eps/8) * Z_a. The top counter a moves when a
fresh strong tracker crosses a power of two; the lower counter b moves when the
stitched estimate crosses the next eps/8 step. Every tracker or difference
estimator whose value reaches the public output is revealed once, logged, and
never consulted again. See docs/ROBUST_FRAMEWORK.md for the lifecycle.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass

from diff_estimators import DE_KINDS, FIXED_PREFIX, DEDimension, F2Block, FpSmallBlock, new_block
from entropy import EntropySketch, entropy_rows, interpolate_entropy
from helpers import (
    CapacityError,
    DomainError,
    ParameterError,
    RevealError,
    ceil_log2,
    check_delta,
    check_eps,
    config_value,
    constants_mode,
    practical_constant,
)
from rand_core import Seed, derive_seed
from sketches import (
    BankGroup,
    CountSketchTable,
    F0Sketch,
    FpLargeTracker,
    SketchBank,
    f0_estimate,
    f2_estimate,
    li_fp_estimate,
)

logger = logging.getLogger("Robust")

TURNSTILE_KINDS = ("F2", "FpSmall")


def lsb(x, i=1):
    """1-indexed position of the i-th least significant set bit of x."""
    x, i = int(x), int(i)
    if x <= 0 or i < 1:
        raise DomainError(f"lsb needs x > 0 and i >= 1, got x={x}, i={i}")
    seen = 0
    position = 0
    rest = x
    while rest:
        position += 1
        if rest & 1:
            seen += 1
            if seen == i:
                return position
        rest >>= 1
    raise DomainError(f"{x} has fewer than {i} set bits")


def numbits(x):
    if x < 0:
        raise DomainError(f"numbits needs x >= 0, got {x}")
    return bin(int(x)).count("1")


def flip_number_bound(eps, m, p=1.0):
    """Provisioning budget: O(max(p, 1)/eps * log m) switches over m updates."""
    check_eps(eps)
    return math.ceil(max(1.0, p) / eps * math.log2(max(int(m), 2))) + 1


@dataclass(frozen=True)
class RobustParams:
    eps: float
    kind: str = "F2"
    p: float = 2.0
    delta: float = 0.1
    constants: str = None
    universe: int = None
    twist_budget: int = 0

    def __post_init__(self):
        check_eps(self.eps)
        check_delta(self.delta)
        if self.kind not in DE_KINDS:
            raise ParameterError(f"robust kind must be one of {DE_KINDS}, got {self.kind!r}")
        if self.kind == "F2":
            object.__setattr__(self, "p", 2.0)
        elif self.kind == "F0":
            object.__setattr__(self, "p", 0.0)
        elif self.kind == "FpSmall" and not (0 < self.p < 2):
            raise ParameterError(f"FpSmall needs p in (0, 2), got {self.p}")
        elif self.kind == "FpLarge":
            if int(self.p) != self.p or not (3 <= self.p <= 8):
                raise ParameterError(f"FpLarge needs integer p in [3, 8], got {self.p}")
            if self.universe is None:
                raise ParameterError("FpLarge needs a declared universe")
        if self.twist_budget < 0:
            raise ParameterError("twist budget must be nonnegative")
        object.__setattr__(self, "constants", constants_mode(self.constants))

    @property
    def exponent(self):
        """C in the difference-estimator space gamma**C / eps**2."""
        return 2.0 / self.p if self.kind == "FpSmall" else 1.0

    @property
    def beta(self):
        return ceil_log2(8.0 / self.eps)

    @property
    def phi(self):
        return 2.0 ** ((self.exponent - 1.0) / 4.0)

    @property
    def zeta(self):
        # the closed form has a pole at C = 1; the C = 1 branch never uses zeta's growth
        if self.exponent == 1.0:
            return 1.0
        return 2.0 / (self.phi - 1.0)

    @property
    def eta(self):
        if self.constants == "theory":
            return self.eps / (64.0 * self.zeta)
        return self.eps / float(config_value("de_accuracy_divisor", 8))

    def gamma(self, j):
        return min(1.0, 2.0 ** (j - 1) * self.eta)

    def eta_level(self, j):
        if self.exponent == 1.0:
            return self.eta / self.beta if self.constants == "theory" else self.eta
        return self.eta / self.phi ** max(0, self.beta - j)

    def delta_prime(self, top_indices=64, per_level=None):
        per_level = per_level or self.instances(1, turnstile=self.twist_budget > 0)
        return self.delta / (64.0 * self.beta * (top_indices + self.twist_budget) * per_level)

    @property
    def levels(self):
        if self.constants == "theory":
            return self.beta
        margin = float(config_value("instance_margin", 1.5))
        return max(self.beta, ceil_log2(margin * 8.0 / self.eps + 2.0))

    def _confidence(self):
        # theory mode pays the log(1/delta') union bound on every instance
        if self.constants == "theory":
            return math.ceil(math.log(1.0 / self.delta_prime()))
        return 1

    def _round(self, rows):
        rows = max(1, int(rows))
        if self.kind == "FpSmall":
            q = int(config_value("q", 3))
            rows = q * math.ceil(rows / q)
        return rows

    def level_rows(self, j):
        if self.kind == "FpLarge":
            # heavy coordinates are counted exactly; only the light remainder is sampled
            spread = self.universe ** (1.0 - 2.0 / self.p)
            return max(1, math.ceil(self.gamma(j) * spread / self.eps ** 2))
        c = practical_constant()
        rows = math.ceil(c * self.gamma(j) ** self.exponent / self.eta_level(j) ** 2)
        return self._round(rows * self._confidence())

    def tracker_eps(self):
        return self.eps / float(config_value("tracker_accuracy_divisor", 4))

    def tracker_rows(self):
        c = practical_constant()
        return self._round(math.ceil(c / self.tracker_eps() ** 2) * self._confidence())

    def instances(self, j, turnstile=False):
        margin = float(config_value("instance_margin", 1.5))
        count = math.ceil(margin * (8.0 / self.eps) / 2 ** j) + 1
        return count + (self.twist_budget if turnstile else 0)

    def trackers_per_epoch(self, turnstile=False):
        return 1 + (self.twist_budget if turnstile else 0)

    @property
    def growth(self):
        """How fast a missed prefix fades: F(prefix)/F must fall like (eps)**growth."""
        if self.kind == "F2":
            return 2.0
        if self.kind == "F0":
            return 1.0
        return max(1.0, self.p)

    def window(self):
        slack = float(config_value("epoch_window_slack", 3))
        return math.ceil(self.growth * (math.log2(1.0 / self.eps) + slack))


def space_accounting(params, turnstile=False):
    levels = range(1, params.levels + 1)
    level_rows = [params.level_rows(j) for j in levels]
    instances = [params.instances(j, turnstile) for j in levels]
    base = math.ceil(practical_constant() / params.eta ** 2)
    tracker = params.tracker_rows()
    return {
        "kind": params.kind,
        "eps": params.eps,
        "levels": params.levels,
        "gamma": [params.gamma(j) for j in levels],
        "eta": [params.eta_level(j) for j in levels],
        "level_rows": level_rows,
        "instances": instances,
        "base_rows": base,
        "tracker_rows": tracker,
        "stack_rows": tracker + sum(level_rows),
        "epoch_rows": tracker * params.trackers_per_epoch(turnstile) + sum(r * n for r, n in zip(level_rows, instances)),
        "window": params.window(),
    }


@dataclass(frozen=True)
class RevealEntry:
    event: str
    instance_id: str
    t: int
    value: float


class RevealLog:
    def __init__(self):
        self.entries = []
        self._ids = set()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, instance_id):
        return instance_id in self._ids

    def record(self, event, instance_id, t, value):
        if instance_id in self._ids:
            raise RevealError(f"instance {instance_id} was already revealed")
        self._ids.add(instance_id)
        entry = RevealEntry(event, instance_id, int(t), float(value))
        self.entries.append(entry)
        logger.debug("reveal %s %s at t=%d -> %.6g", event, instance_id, t, value)
        return entry

    def to_jsonl(self):
        return "".join(json.dumps(asdict(entry)) + "\n" for entry in self.entries)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_jsonl())


def audit_reveals(logs):
    """Duplicate instance ids within each log, as (log index, id) pairs."""
    duplicates = []
    for index, log in enumerate(logs):
        entries = log.entries if isinstance(log, RevealLog) else log
        seen = set()
        for entry in entries:
            instance_id = entry.instance_id if isinstance(entry, RevealEntry) else entry["instance_id"]
            if instance_id in seen:
                duplicates.append((index, instance_id))
            seen.add(instance_id)
    return duplicates


class SketchTracker:
    def __init__(self, sketch, read, instance_id, banked=False):
        self.sketch = sketch
        self.read = read
        self.instance_id = instance_id
        self.banked = banked

    @property
    def rows(self):
        return self.sketch.rows

    def update(self, item, delta=1):
        if not self.banked:
            self.sketch.update(item, delta)

    def estimate(self):
        return float(self.read(self.sketch))


class Epoch:
    """
    Trackers and per-level block pools opened together at time `opened_at`.
    Banked members are updated through their bank; `loose` ones one by one.
    """

    def __init__(self, a, opened_at):
        self.a = a
        self.opened_at = opened_at
        self.trackers = []
        self.blocks = {}
        self.banks = []
        self.loose = []
        self.placements = {}

    @property
    def rows(self):
        return sum(t.rows for t in self.trackers) + sum(b.rows for pool in self.blocks.values() for b in pool)

    def place(self, member, bank, view):
        self.placements[id(member)] = (bank, view)

    def retire(self, member):
        """A revealed member is never read again, so it stops ingesting."""
        if member in self.loose:
            self.loose.remove(member)
        placed = self.placements.pop(id(member), None)
        if placed is not None:
            bank, view = placed
            bank.retire(view)

    def update_loose(self, item, delta=1):
        for member in self.loose:
            member.update(item, delta)

    def update(self, item, delta=1):
        for bank in self.banks:
            bank.update(item, delta)
        self.update_loose(item, delta)


class SubEstimatorFamily:
    """Builds the trackers and blocks of an epoch; subclasses choose the estimators."""

    name = None

    def tracker(self, params, seed, instance_id):
        raise NotImplementedError

    def block(self, params, level, seed, instance_id, t):
        raise NotImplementedError

    def build_epoch(self, params, a, t, seed, turnstile=False):
        epoch = Epoch(a, t)
        for i in range(params.trackers_per_epoch(turnstile)):
            tracker = self.tracker(params, derive_seed(seed, f"tracker{i}"), f"a{a}:tracker:{i}")
            epoch.trackers.append(tracker)
            epoch.loose.append(tracker)
        for j in range(1, params.levels + 1):
            epoch.blocks[j] = []
            for i in range(params.instances(j, turnstile)):
                block = self.block(params, j, derive_seed(seed, f"k{j}.{i}"), f"a{a}:k{j}:{i}", t)
                epoch.blocks[j].append(block)
                epoch.loose.append(block)
        return epoch


class SketchFamily(SubEstimatorFamily):
    name = "sketch"

    def dimension(self, params, level):
        return DEDimension(
            params.kind,
            params.gamma(level),
            min(params.eta_level(level), 0.5),
            params.delta,
            params.p if params.kind != "F0" else 2.0,
            params.universe,
            rows_override=params.level_rows(level),
        )

    def tracker(self, params, seed, instance_id):
        rows = params.tracker_rows()
        if params.kind == "F0":
            return SketchTracker(F0Sketch(rows, seed, params.universe), f0_estimate, instance_id)
        if params.kind == "FpLarge":
            sketch = FpLargeTracker(params.p, params.tracker_eps(), params.universe, seed)
            return SketchTracker(sketch, lambda s: s.estimate(), instance_id)
        raise ParameterError(f"{params.kind} trackers are allocated from a bank")

    def block(self, params, level, seed, instance_id, t):
        return new_block(self.dimension(params, level), seed, FIXED_PREFIX, t1=t, instance_id=instance_id)

    def build_epoch(self, params, a, t, seed, turnstile=False):
        if params.kind not in ("F2", "FpSmall"):
            return super().build_epoch(params, a, t, seed, turnstile)
        epoch = Epoch(a, t)
        trackers = params.trackers_per_epoch(turnstile)
        per_level = {j: params.instances(j, turnstile) for j in range(1, params.levels + 1)}
        sizes = [params.tracker_rows()] * trackers
        for j, count in per_level.items():
            sizes += [params.level_rows(j)] * count
        family = "sign" if params.kind == "F2" else "stable"
        bank = SketchBank(family, derive_seed(seed, "bank"), sizes, p=params.p)
        epoch.banks.append(bank)
        views = iter(bank.views)
        read = f2_estimate if params.kind == "F2" else li_fp_estimate
        block_type = F2Block if params.kind == "F2" else FpSmallBlock
        for i in range(trackers):
            view = next(views)
            tracker = SketchTracker(view, read, f"a{a}:tracker:{i}", banked=True)
            epoch.trackers.append(tracker)
            epoch.place(tracker, bank, view)
        for j, count in per_level.items():
            dimension = self.dimension(params, j)
            epoch.blocks[j] = []
            for i in range(count):
                view = next(views)
                block = block_type(dimension, derive_seed(seed, f"k{j}.{i}"), FIXED_PREFIX, t, f"a{a}:k{j}:{i}", sketch=view)
                epoch.blocks[j].append(block)
                epoch.place(block, bank, view)
        return epoch


class RobustLedger:
    """
    Counters and pools of the robust framework.

    `a` indexes the top layer (Z_a is the revealed tracker value that opened it),
    `b` the lower layer. `frozen[k]` is the revealed value of the last level-k
    block and `split_times[k]` its successor's split time. In turnstile mode the
    relative counter b - anchor_b drives the stitch and `offset` carries the
    revealed estimate at the last re-anchor.
    """

    def __init__(self, params, seed=None, family=None, turnstile=False):
        if turnstile and params.kind not in TURNSTILE_KINDS:
            raise ParameterError(f"turnstile streams need a linear kind {TURNSTILE_KINDS}, got {params.kind}")
        self.params = params
        self.seed = seed if seed is not None else Seed.parse(config_value("seed", "0"))
        self.family = family or SketchFamily()
        self.turnstile = turnstile
        self.t = 0
        self.a = 0
        self.b = 0
        self.tau = 0
        self.anchor_b = 0
        self.offset = 0.0
        self.Z = {}
        self.frozen = {}
        self.split_times = {}
        self.cursor = {}
        self.tracker_cursor = {}
        self.epochs = {}
        self.reveals = RevealLog()
        self.listeners = []
        self.banks = BankGroup()
        self._open_epochs()

    @property
    def revealed(self):
        return self.reveals._ids

    @property
    def rows(self):
        return sum(epoch.rows for epoch in self.epochs.values())

    def _open_epochs(self):
        for e in range(max(1, self.a), self.a + self.params.window() + 1):
            if e not in self.epochs:
                seed = derive_seed(self.seed, f"epoch{e}")
                self.epochs[e] = self.family.build_epoch(self.params, e, self.t, seed, self.turnstile)
                for bank in self.epochs[e].banks:
                    self.banks.add(bank)
                logger.info("opened epoch %d at t=%d (%d rows)", e, self.t, self.epochs[e].rows)
        if not self.turnstile:
            for e in [e for e in self.epochs if e < self.a]:
                for bank in self.epochs[e].banks:
                    self.banks.discard(bank)
                del self.epochs[e]
                self.cursor = {key: v for key, v in self.cursor.items() if key[0] != e}

    def _notify(self, event, level):
        for listener in self.listeners:
            listener(event, level, self)

    def ingest(self, item, delta):
        if int(item) != item or item < 0:
            raise DomainError(f"items are nonnegative integers, got {item}")
        if self.params.universe is not None and item >= self.params.universe:
            raise DomainError(f"item {item} outside universe [0, {self.params.universe})")
        self.t += 1
        self.banks.update(int(item), delta)
        for epoch in self.epochs.values():
            epoch.update_loose(int(item), delta)

    def tracker(self, e=None):
        e = self.a + 1 if e is None else e
        index = self.tracker_cursor.get(e, 0)
        pool = self.epochs[e].trackers
        if index >= len(pool):
            raise CapacityError(
                f"epoch {e}: all {len(pool)} trackers revealed at t={self.t}; raise the twist budget"
            )
        return pool[index]

    def tracker_reading(self):
        return self.tracker().estimate()

    def block(self, level):
        pool = self.epochs[self.a].blocks.get(level)
        if pool is None:
            raise CapacityError(
                f"stitch needs level {level} but only {self.params.levels} are provisioned (b={self.b}, t={self.t})"
            )
        index = self.cursor.get((self.a, level), 0)
        if index >= len(pool):
            raise CapacityError(
                f"epoch {self.a} level {level}: all {len(pool)} blocks revealed at t={self.t}; "
                "raise instance_margin or the twist budget"
            )
        return pool[index]

    def components(self):
        """(live level, higher frozen levels) from the bits of the relative counter plus one."""
        c = self.b - self.anchor_b + 1
        bits = [z for z in range(1, c.bit_length() + 1) if (c >> (z - 1)) & 1]
        return bits[0], bits[1:]

    def threshold(self, b):
        return (1.0 + b * self.params.eps / 8.0) * self.Z[self.a]

    def publish(self):
        if self.a == 0:
            return 0.0
        return self.threshold(self.b)

    def _reveal_tracker(self, value):
        e = self.a + 1
        tracker = self.tracker(e)
        self.reveals.record("tracker", tracker.instance_id, self.t, value)
        self.epochs[e].retire(tracker)
        self.tracker_cursor[e] = self.tracker_cursor.get(e, 0) + 1
        self.tau += 1

    def _reveal_block(self, level, block, value):
        self.reveals.record("block", block.instance_id, self.t, value)
        self.epochs[self.a].retire(block)
        self.cursor[(self.a, level)] = self.cursor.get((self.a, level), 0) + 1
        self.tau += 1

    def split_levels(self, levels):
        for k in levels:
            self.block(k).restart(self.t)
            self.split_times[k] = self.t

    def _reset_stitch(self):
        self._notify("reset", self.params.levels)
        self.frozen = {}
        self.split_levels(range(1, self.params.levels + 1))

    def switch_up(self, x):
        self._reveal_tracker(x)
        self.a += 1
        self.b = 0
        self.anchor_b = 0
        self.offset = 0.0
        self.Z[self.a] = x
        self._open_epochs()
        self._reset_stitch()
        logger.info("top layer %d -> %d at t=%d (Z=%.6g)", self.a - 1, self.a, self.t, x)

    def switch_down(self, x):
        self._reveal_tracker(x)
        self.a -= 1
        logger.info("top layer %d -> %d at t=%d (X=%.6g)", self.a + 1, self.a, self.t, x)
        if self.a == 0:
            self.b = 0
            self.anchor_b = 0
            self.offset = 0.0
            return
        z = self.Z.get(self.a)
        if z is None or x < z:
            self.Z[self.a] = x
            b = 0
        else:
            b = int(math.floor((8.0 / self.params.eps) * (x / z - 1.0)))
        self._reanchor(x, b)

    def increment(self):
        level, _ = self.components()
        block = self.block(level)
        value = block.estimate()
        self._reveal_block(level, block, value)
        self.b += 1
        self.frozen[level] = value
        self._notify("freeze", level)
        self.split_levels(range(1, level + 1))
        logger.debug("b -> %d at t=%d, froze level %d (%.6g)", self.b, self.t, level, value)

    def _reveal_live(self):
        level, _ = self.components()
        block = self.block(level)
        self._reveal_block(level, block, block.estimate())

    def _reanchor(self, x, b):
        self.b = b
        self.anchor_b = b
        self.offset = x - self.Z[self.a]
        self._reset_stitch()
        logger.debug("re-anchored at t=%d: b=%d, X=%.6g", self.t, b, x)

    def decrement(self, x):
        self._reveal_live()
        self._reanchor(x, self.b - 1)

    def refresh(self, x):
        self._reveal_live()
        self._reanchor(x, self.b)

    def live_block(self):
        return self.block(self.components()[0])


def estimate_f(ledger):
    """Z_a plus the frozen levels of b+1 plus one unrevealed block at its lowest bit."""
    if ledger.a == 0:
        return 0.0
    live, higher = ledger.components()
    stitched = ledger.Z[ledger.a] + ledger.offset + sum(ledger.frozen[z] for z in higher)
    return stitched + ledger.block(live).estimate()


def robust_step(ledger, update):
    item, delta = update
    if delta < 0:
        raise DomainError("robust_step takes insertion-only updates; use robust_turnstile_step for deletions")
    ledger.ingest(item, delta)
    x = ledger.tracker_reading()
    if x > 2 ** ledger.a:
        ledger.switch_up(x)
    if ledger.a >= 1 and estimate_f(ledger) > ledger.threshold(ledger.b + 1):
        ledger.increment()
    return ledger.publish()


def robust_turnstile_step(ledger, update):
    if not ledger.turnstile:
        raise ParameterError("the ledger was provisioned for insertion-only streams")
    item, delta = update
    ledger.ingest(item, delta)
    x = ledger.tracker_reading()
    if x > 2 ** ledger.a:
        ledger.switch_up(x)
    elif ledger.a >= 1 and x < 2 ** (ledger.a - 1):
        ledger.switch_down(x)
    if ledger.a >= 1:
        x = estimate_f(ledger)
        if x > ledger.threshold(ledger.b + 1):
            ledger.increment()
        elif x < ledger.threshold(ledger.b - 1):
            ledger.decrement(x)
        else:
            level, _ = ledger.components()
            if ledger.block(level).suffix_moment() > ledger.params.gamma(level) * x:
                ledger.refresh(x)
    return ledger.publish()


class RobustHeavyHitters:
    """
    L2 heavy hitters on top of a robust F2 ledger. Each level keeps a count
    sketch of the updates since that level's split; the sketch is queried once
    when its interval is frozen and then replaced. Reported items are counted
    exactly from then on.
    """

    def __init__(self, eps, universe, seed=None, delta=0.1, constants=None, family=None):
        seed = seed if seed is not None else Seed.parse(config_value("seed", "0"))
        self.eps = check_eps(eps)
        self.universe = int(universe)
        self.params = RobustParams(eps, "F2", delta=delta, constants=constants, universe=universe)
        self.ledger = RobustLedger(self.params, derive_seed(seed, "moment"), family)
        self.seed = derive_seed(seed, "heavy")
        self.serial = 0
        self.tables = {}
        self.base = {}
        self.counts = {}
        self._fresh(range(1, self.params.levels + 1))
        self.ledger.listeners.append(self._on_event)

    def _fresh(self, levels):
        for k in levels:
            self.tables[k] = CountSketchTable.for_accuracy(self.eps, derive_seed(self.seed, f"table{self.serial}"), self.universe)
            self.serial += 1

    def _harvest(self, level, ledger):
        table = self.tables[level]
        scale = math.sqrt(max(ledger.publish(), 0.0))
        estimates = table.query_many()
        threshold = 0.5 * self.eps * scale
        for item in (int(i) for i in (estimates >= max(threshold, 0.5)).nonzero()[0]):
            if item not in self.counts:
                self.base[item] = float(estimates[item])
                self.counts[item] = 0
                logger.debug("heavy candidate %d reported from level %d at t=%d", item, level, ledger.t)

    def _on_event(self, event, level, ledger):
        self._harvest(level, ledger)
        self._fresh(range(1, level + 1))

    def update(self, item, delta=1):
        for table in self.tables.values():
            table.update(item, delta)
        if item in self.counts:
            self.counts[item] += delta
        return robust_step(self.ledger, (item, delta))

    def report(self):
        l2 = math.sqrt(max(self.ledger.publish(), 0.0))
        floor = 0.75 * self.eps * l2
        found = [(item, self.base[item] + self.counts[item]) for item in self.counts]
        return sorted([(i, f) for i, f in found if f >= floor], key=lambda pair: -pair[1])


def robust_heavy_hitters(state):
    return state.report()


@dataclass
class RobustMoment:
    """One robust F_y estimator of RobustEntropy; `published` is the moment it last revealed."""

    power: float
    label: str
    published: float = None
    revealed: int = 0

    def reveal(self, log, instance, t, value):
        log.record("entropy", f"{self.label}:{instance}", t, value)
        self.published = float(value)
        self.revealed += 1


class RobustEntropy:
    """
    Robust F_y estimators at the interpolation nodes plus a robust F_1 anchor;
    the output interpolates their published moments.

    Instance c of every estimator is the matching row block of EntropySketch c,
    so all estimators read the same stable draws and their errors cancel in
    F_y / F_1**y. They switch on one clock: when the entropy read from the live
    instances drifts more than eps/2 from the output, each estimator reveals
    its live instance and moves to the next one.
    """

    def __init__(self, eps, stream_length, seed=None, pool=None, rows=None, constants=None):
        seed = seed if seed is not None else Seed.parse(config_value("seed", "0"))
        self.eps = check_eps(eps)
        self.size = int(pool or flip_number_bound(eps / 2.0, stream_length))
        rows = rows or entropy_rows(eps)
        self.instances = [
            EntropySketch(eps, derive_seed(seed, f"entropy{i}"), rows=rows, stream_length=stream_length, mode=constants)
            for i in range(self.size)
        ]
        self.ys = self.instances[0].ys
        self.estimators = [RobustMoment(float(y), f"entropy:y{i}") for i, y in enumerate(self.ys)]
        self.estimators.append(RobustMoment(1.0, "entropy:f1"))
        self.cursor = 0
        self.t = 0
        self.published = None
        self.reveals = RevealLog()

    @property
    def moments(self):
        return [estimator.published for estimator in self.estimators]

    def _interpolate(self, moments):
        if moments[-1] <= 0:
            return 0.0
        return interpolate_entropy(self.ys, moments[:-1], moments[-1])

    def update(self, item, delta=1):
        if delta < 0:
            raise DomainError("robust entropy takes insertion-only updates")
        self.t += 1
        for sketch in self.instances[self.cursor:]:
            sketch.update(item, delta)
        if self.cursor >= self.size:
            raise CapacityError(f"all {self.size} entropy instances revealed by t={self.t}")
        live = self.instances[self.cursor].moments()
        if self.published is None or abs(self._interpolate(live) - self.published) > self.eps / 2.0:
            for estimator, moment in zip(self.estimators, live):
                estimator.reveal(self.reveals, self.cursor, self.t, moment)
            self.published = self._interpolate(self.moments)
            logger.debug("entropy estimators switched to instance %d at t=%d", self.cursor + 1, self.t)
            self.cursor += 1
        return self.published


def robust_entropy(state):
    return state.published
