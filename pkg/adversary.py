"""
Adaptive-adversary duels.

A duel alternates strictly: the adversary sees the public outputs so far and
names the next update, the target ingests it and publishes one number. The
adversary never sees anything else; its choices are a deterministic function
of its own seed and that output transcript, so a transcript can be replayed
against a fresh target and must reproduce every output.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from helpers import CapacityError, DomainError, ParameterError, config_value, relative_error
from oracle import ExactState, moment_order
from rand_core import Seed, derive_seed
from robust_framework import RobustEntropy, RobustLedger, audit_reveals, robust_step, robust_turnstile_step
from sketches import SignSketch, f2_estimate
from sliding_window import new_histogram

logger = logging.getLogger("Duel")

STREAM_KINDS = ("uniform", "zipf", "bursty", "delete-heavy")
STRATEGY_TAGS = ("output-probe", "estimate-inflation", "smooth-histogram-stressor", "oblivious-wrapper")


def _root(seed):
    if seed is None:
        return Seed.parse(config_value("seed", "0"))
    return seed if isinstance(seed, Seed) else Seed.parse(seed)


def parse_generator(text):
    """'zipf:1.2' -> ('zipf', {'s': 1.2}); bare kinds take their defaults."""
    kind, _, arg = str(text).partition(":")
    kind = kind.strip().lower()
    if kind not in STREAM_KINDS:
        raise ParameterError(f"generator must be one of {STREAM_KINDS}, got {kind!r}")
    if not arg:
        return kind, {}
    try:
        value = float(arg)
    except ValueError:
        raise ParameterError(f"generator argument must be numeric, got {arg!r}") from None
    key = {"uniform": None, "zipf": "s", "bursty": "burst", "delete-heavy": "delete_fraction"}[kind]
    if key is None:
        raise ParameterError("the uniform generator takes no argument")
    return kind, {key: value}


def zipf_probabilities(n, s):
    weights = 1.0 / np.arange(1, n + 1) ** s
    return weights / weights.sum()


def generate_stream(kind, n, m, seed=None, s=1.1, burst=16.0, delete_fraction=0.4):
    """Reproducible (item, delta) updates over items 0..n-1."""
    if n < 1 or m < 0:
        raise ParameterError(f"streams need n >= 1 and m >= 0, got n={n}, m={m}")
    rng = derive_seed(_root(seed), f"stream:{kind}").generator()
    if kind == "uniform":
        items = rng.integers(0, n, size=m)
        return [(int(i), 1) for i in items]
    if kind == "zipf":
        if s <= 0:
            raise ParameterError(f"zipf exponent must be positive, got {s}")
        items = rng.choice(n, size=m, p=zipf_probabilities(n, s))
        return [(int(i), 1) for i in items]
    if kind == "bursty":
        updates = []
        while len(updates) < m:
            item = int(rng.integers(0, n))
            length = int(rng.geometric(1.0 / max(burst, 1.0)))
            updates.extend([(item, 1)] * min(length, m - len(updates)))
        return updates
    if kind == "delete-heavy":
        if not (0 <= delete_fraction < 1):
            raise ParameterError(f"delete fraction must lie in [0, 1), got {delete_fraction}")
        counts = np.zeros(n, dtype=np.int64)
        updates = []
        for _ in range(m):
            present = np.flatnonzero(counts)
            if present.size and rng.random() < delete_fraction:
                item = int(present[rng.integers(0, present.size)])
                counts[item] -= 1
                updates.append((item, -1))
            else:
                item = int(rng.integers(0, n))
                counts[item] += 1
                updates.append((item, 1))
        return updates
    raise ParameterError(f"generator must be one of {STREAM_KINDS}, got {kind!r}")


class DuelTarget:
    """An algorithm as the adversary sees it: feed one update, get one number."""

    name = "target"
    reveals = None

    def feed(self, update):
        raise NotImplementedError

    def truth(self, state):
        raise NotImplementedError


class RobustTarget(DuelTarget):
    def __init__(self, params, seed=None, turnstile=False, family=None):
        self.ledger = RobustLedger(params, _root(seed), family, turnstile)
        self.p = moment_order(params)
        self.turnstile = turnstile
        self.name = f"robust-{params.kind}" + ("-turnstile" if turnstile else "")

    @property
    def reveals(self):
        return self.ledger.reveals

    def feed(self, update):
        if self.turnstile:
            return robust_turnstile_step(self.ledger, update)
        return robust_step(self.ledger, update)

    def truth(self, state):
        return state.moment(self.p)


class PlainSketchTarget(DuelTarget):
    """One AMS sketch published after every update, with no switching."""

    name = "plain-ams"

    def __init__(self, eps, seed=None, rows=None):
        self.sketch = SignSketch(rows or math.ceil(1.0 / eps ** 2), derive_seed(_root(seed), "plain"))

    def feed(self, update):
        item, delta = update
        self.sketch.update(item, delta)
        return f2_estimate(self.sketch)

    def truth(self, state):
        return state.moment(2)


class SlidingTarget(DuelTarget):
    def __init__(self, params, window, seed=None, family=None):
        self.hist = new_histogram(params, _root(seed), family)
        self.window = window
        self.p = params.p
        self.name = f"sliding-F{params.p:g}"

    def feed(self, update):
        item, delta = update
        self.hist.ingest(item, delta)
        return self.hist.query(self.window)

    def truth(self, state):
        return state.window_moment(self.p, self.window)


class EntropyTarget(DuelTarget):
    name = "robust-entropy"

    def __init__(self, eps, stream_length, seed=None):
        self.state = RobustEntropy(eps, stream_length, _root(seed))

    @property
    def reveals(self):
        return self.state.reveals

    def feed(self, update):
        item, delta = update
        return self.state.update(item, delta)

    def truth(self, state):
        return state.entropy()


class AdversaryStrategy:
    """Base adversary: `start(seed)` once, then `next_update(outputs)` per step."""

    tag = None

    def __init__(self, universe):
        if universe < 1:
            raise ParameterError(f"adversary universe must be positive, got {universe}")
        self.universe = int(universe)
        self.rng = None

    def start(self, seed):
        self.rng = derive_seed(_root(seed), f"adversary:{self.tag}").generator()

    def _fresh_item(self):
        return int(self.rng.integers(0, self.universe))

    def next_update(self, outputs):
        raise NotImplementedError


class ObliviousWrapper(AdversaryStrategy):
    """Replays a fixed stream and ignores every output."""

    tag = "oblivious-wrapper"

    def __init__(self, updates, universe=None):
        self.updates = list(updates)
        super().__init__(universe or 1 + max((item for item, _ in self.updates), default=0))
        self.position = 0

    def start(self, seed):
        super().start(seed)
        self.position = 0

    def next_update(self, outputs):
        if self.position >= len(self.updates):
            return None
        update = self.updates[self.position]
        self.position += 1
        return update


class OutputClimber(AdversaryStrategy):
    """
    Greedy correlation climbing. Each fresh item is inserted once as a trial and
    scored by how far the published value moved; items scoring above the
    median so far are kept and re-inserted, and dropped again once their
    re-insertions stop scoring.
    """

    tag = "output-probe"

    def __init__(self, universe, explore=0.5):
        super().__init__(universe)
        self.explore = explore
        self.kept = []
        self.gains = []
        self.last = None

    def start(self, seed):
        super().start(seed)
        self.kept = []
        self.gains = []
        self.last = None

    def _score(self, outputs):
        if self.last is None or not outputs:
            return
        before = outputs[-2] if len(outputs) > 1 else 0.0
        gain = outputs[-1] - before
        item, probing = self.last
        self.gains.append(gain)
        bar = float(np.median(self.gains))
        if gain > bar and item not in self.kept:
            self.kept.append(item)
        elif not probing and gain < bar and item in self.kept:
            self.kept.remove(item)

    def next_update(self, outputs):
        self._score(outputs)
        if not self.kept or self.rng.random() < self.explore:
            item = self._fresh_item()
            self.last = (item, True)
        else:
            item = self.kept[int(self.rng.integers(0, len(self.kept)))]
            self.last = (item, False)
        return item, 1


class EstimateInflation(AdversaryStrategy):
    """Keeps hammering one item while the output is flat and moves on when it jumps."""

    tag = "estimate-inflation"

    def __init__(self, universe):
        super().__init__(universe)
        self.item = None

    def start(self, seed):
        super().start(seed)
        self.item = None

    def next_update(self, outputs):
        moved = len(outputs) > 1 and outputs[-1] != outputs[-2]
        if self.item is None or moved:
            self.item = self._fresh_item()
        return self.item, 1


class SmoothHistogramStressor(AdversaryStrategy):
    """
    Alternates single-item bursts with runs of distinct items, switching mode
    whenever the windowed output grows by more than `ratio` since the last
    switch. Bursts inflate suffix ratios quickly, distinct runs slowly, so
    suffixes keep approaching the merge threshold from both sides.
    """

    tag = "smooth-histogram-stressor"

    def __init__(self, universe, ratio=1.5):
        super().__init__(universe)
        self.ratio = ratio
        self.burst = True
        self.mark = None
        self.item = None

    def start(self, seed):
        super().start(seed)
        self.burst = True
        self.mark = None
        self.item = None

    def next_update(self, outputs):
        current = outputs[-1] if outputs else 0.0
        if self.mark is None:
            self.mark = current
        elif current > self.ratio * max(self.mark, 1.0) or current < self.mark / self.ratio:
            self.burst = not self.burst
            self.mark = current
            self.item = None
        if self.burst:
            if self.item is None:
                self.item = self._fresh_item()
            return self.item, 1
        return self._fresh_item(), 1


def make_strategy(tag, universe, updates=None):
    if tag == "oblivious-wrapper":
        if updates is None:
            raise ParameterError("the oblivious wrapper needs a stream to replay")
        return ObliviousWrapper(updates, universe)
    strategies = {
        "output-probe": OutputClimber,
        "estimate-inflation": EstimateInflation,
        "smooth-histogram-stressor": SmoothHistogramStressor,
    }
    if tag not in strategies:
        raise ParameterError(f"adversary must be one of {STRATEGY_TAGS}, got {tag!r}")
    return strategies[tag](universe)


@dataclass
class DuelStep:
    t: int
    item: int
    delta: int
    output: float
    truth: float
    rel_error: float
    reveals: int = 0


@dataclass
class DuelTranscript:
    target: str
    adversary: str
    seed: int
    steps: list = field(default_factory=list)
    halted: str = None
    reveal_log: list = field(default_factory=list)

    @property
    def updates(self):
        return [(s.item, s.delta) for s in self.steps]

    @property
    def outputs(self):
        return [s.output for s in self.steps]

    def to_frame(self):
        return pd.DataFrame([asdict(s) for s in self.steps], columns=list(DuelStep.__dataclass_fields__))

    def summary(self):
        frame = self.to_frame()
        errors = frame["rel_error"].replace(math.inf, np.nan).dropna()
        return {
            "target": self.target,
            "adversary": self.adversary,
            "seed": self.seed,
            "steps": len(self.steps),
            "halted": self.halted,
            "max_rel_error": float(errors.max()) if len(errors) else 0.0,
            "mean_rel_error": float(errors.mean()) if len(errors) else 0.0,
            "reveals": len(self.reveal_log),
            "duplicate_reveals": len(audit_reveals([self.reveal_log])),
        }

    def to_jsonl(self):
        lines = [json.dumps(asdict(s)) for s in self.steps]
        lines.append(json.dumps({"summary": self.summary()}))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_jsonl())


def run_duel(target, adversary, steps, seed=None, insertion_only=None):
    """
    Play `steps` rounds. A capacity error ends the duel early and is recorded
    in `halted`; any other error propagates.
    """
    seed = _root(seed)
    adversary.start(seed)
    if insertion_only is None:
        insertion_only = not getattr(target, "turnstile", False)
    state = ExactState(insertion_only=insertion_only)
    transcript = DuelTranscript(target.name, adversary.tag, seed.value)
    outputs = []
    for t in range(1, steps + 1):
        update = adversary.next_update(tuple(outputs))
        if update is None:
            break
        item, delta = update
        try:
            output = float(target.feed((item, delta)))
        except CapacityError as exc:
            transcript.halted = str(exc)
            logger.info("duel %s vs %s halted at t=%d: %s", target.name, adversary.tag, t, exc)
            break
        state.update(item, delta)
        truth = float(target.truth(state))
        outputs.append(output)
        reveals = len(target.reveals) if target.reveals is not None else 0
        transcript.steps.append(DuelStep(t, int(item), int(delta), output, truth, relative_error(output, truth), reveals))
    if target.reveals is not None:
        transcript.reveal_log = [asdict(entry) for entry in target.reveals.entries]
    summary = transcript.summary()
    logger.info(
        "duel %s vs %s: %d steps, max rel error %.4f",
        target.name, adversary.tag, summary["steps"], summary["max_rel_error"],
    )
    return transcript


def run_oblivious(target, updates, seed=None):
    return run_duel(target, ObliviousWrapper(updates), len(updates), seed)


@dataclass(frozen=True)
class ReplayResult:
    passed: bool
    divergent_step: int = None
    expected: float = None
    actual: float = None


def replay_check(transcript, fresh):
    """Feed the transcript's updates to `fresh` and compare outputs bit for bit."""
    for step in transcript.steps:
        try:
            output = float(fresh.feed((step.item, step.delta)))
        except (CapacityError, DomainError):
            return ReplayResult(False, step.t, step.output, None)
        if output != step.output:
            logger.info("replay diverged at t=%d: %.17g != %.17g", step.t, output, step.output)
            return ReplayResult(False, step.t, step.output, output)
    return ReplayResult(True)
