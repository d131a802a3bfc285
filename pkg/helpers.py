import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

SCRIPT_DIR = Path(__file__).parent
CONFIG_FILE = SCRIPT_DIR / "config" / "standard.json"
with open(CONFIG_FILE) as f:
    RUNTIME_CONFIG = json.load(f)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CAPACITY = 3
EXIT_IO = 4

CONSTANTS_MODES = ("practical", "theory")

KIND_DISPLAY = {
    "f2": "F2 (second moment)",
    "f0": "F0 (distinct elements)",
    "fp": "Fp moment",
    "entropy": "Shannon entropy",
    "hh": "L2 heavy hitters",
}

LOG_FORMAT = "[%(name)s] %(message)s"


class SketchError(Exception):
    exit_code = EXIT_VALIDATION


class DomainError(SketchError):
    """An item or delta outside the declared universe or stream model."""


class ParameterError(SketchError):
    """Invalid construction parameter (eps, p, q, window, ...)."""


class IncompatibleSketchError(SketchError):
    """Two sketches combined that do not share dimension, family or seed."""


class CapacityError(SketchError):
    exit_code = EXIT_CAPACITY


class RevealError(SketchError):
    """A one-time instance was queried for publication a second time."""


class RegistrationError(SketchError):
    """Suffix registration violated min(F(u), F(u+v)-F(v)) <= gamma*F(v)."""


class StreamFormatError(SketchError):
    exit_code = EXIT_IO


def config_value(key, default=None):
    env_key = "SKETCH_" + key.upper()
    if env_key in os.environ:
        raw = os.environ[env_key]
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return RUNTIME_CONFIG.get(key, default)


def configure_logging(level=None, stream=None):
    level = level or os.environ.get("SKETCH_LOG_LEVEL", "WARNING")
    root = logging.getLogger()
    if not any(getattr(h, "_sketch_handler", False) for h in root.handlers):
        handler = logging.StreamHandler(stream or sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._sketch_handler = True
        root.addHandler(handler)
    root.setLevel(level.upper() if isinstance(level, str) else level)
    return root


def constants_mode(mode=None):
    mode = mode or os.environ.get("SKETCH_CONSTANTS") or RUNTIME_CONFIG.get("constants_mode", "practical")
    if mode not in CONSTANTS_MODES:
        raise ParameterError(f"constants mode must be one of {CONSTANTS_MODES}, got {mode!r}")
    return mode


def practical_constant():
    return float(config_value("practical_constant", 8))


def check_eps(eps, upper=1.0):
    if not (0 < eps < upper):
        raise ParameterError(f"eps must lie in (0, {upper}), got {eps}")
    return float(eps)


def check_delta(delta):
    if not (0 < delta < 1):
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    return float(delta)


def ceil_log2(x):
    if x <= 1:
        return 0
    return int(math.ceil(math.log2(x)))


def median_of_means(values, groups):
    values = np.asarray(values, dtype=float)
    groups = max(1, min(int(groups), values.size))
    if groups == 1:
        return float(values.mean())
    usable = values.size - values.size % groups
    means = values[:usable].reshape(groups, -1).mean(axis=1)
    return float(np.median(means))


def relative_error(estimate, truth):
    if truth == 0:
        return 0.0 if estimate == 0 else math.inf
    return abs(estimate - truth) / abs(truth)


def format_estimate(value):
    if value is None:
        return "-"
    if abs(value) >= 1e6:
        return f"{value:.4e}"
    return f"{value:,.3f}"


def format_seed(seed_value):
    return f"0x{seed_value:x}"
