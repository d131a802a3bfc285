"""
Shannon entropy from fractional moments just below 1.

For nodes y near 1 the Tsallis gap T(y) = (1 - F_y / F_1**y) / (y - 1) tends to
the entropy in nats as y -> 1. We sketch F_y at k+1 Chebyshev-spaced nodes,
interpolate T with a degree-k polynomial and read it off at y = 1.
"""

import logging
import math

import numpy as np
from scipy.interpolate import BarycentricInterpolator

from helpers import DomainError, ParameterError, check_eps, config_value, constants_mode
from rand_core import StableParams, sample_p_stable, stable_uniforms
from sketches import li_terms

logger = logging.getLogger("Entropy")


def node_count(eps, stream_length):
    log_m = math.log2(max(stream_length, 4))
    return max(1, math.ceil(math.log2(1.0 / eps) + math.log2(log_m)))


def node_span(k, stream_length):
    return 1.0 / (2.0 * (k + 1) * math.log2(max(stream_length, 4)))


def nodes(eps, stream_length, mode=None):
    """Interpolation nodes y_0..y_k, all inside (0, 1)."""
    check_eps(eps)
    if constants_mode(mode) == "theory":
        k = node_count(eps, stream_length)
        ell = node_span(k, stream_length)
    else:
        k = int(config_value("entropy_nodes", 3))
        ell = float(config_value("entropy_span", 0.1))
    if k < 1 or not (0 < ell < 1):
        raise ParameterError(f"entropy nodes need k >= 1 and span in (0, 1), got k={k}, span={ell}")
    z = np.cos(np.arange(k + 1) * math.pi / k)
    f = ((k * k * ell) * z - ell * (k * k + 1)) / (2 * k * k + 1)
    return 1.0 + f


def tsallis_gap(y, moment, f1):
    return (1.0 - moment / f1 ** y) / (y - 1.0)


def interpolate_entropy(ys, moments, f1):
    """Entropy in bits from F_y estimates at the nodes and an F_1 estimate."""
    ys = np.asarray(ys, dtype=float)
    moments = np.asarray(moments, dtype=float)
    if f1 <= 0:
        raise DomainError("entropy of an empty stream is undefined")
    gaps = tsallis_gap(ys, moments, f1)
    poly = BarycentricInterpolator(ys - 1.0, gaps)
    nats = float(poly(0.0))
    return max(0.0, nats / math.log(2.0))


def entropy_rows(eps):
    q = int(config_value("q", 3))
    d = math.ceil(float(config_value("entropy_row_constant", 280)) / eps ** 2)
    return q * math.ceil(d / q)


class EntropySketch:
    """
    Stable sketches of one stream at every node plus an anchor at y = 1.

    All rows share one set of (theta, r) uniforms per item, so the node errors
    move together and largely cancel in F_y / F_1**y.
    """

    def __init__(self, eps, seed, ys=None, rows=None, stream_length=None, mode=None):
        check_eps(eps)
        self.eps = eps
        self.seed = seed
        self.ys = nodes(eps, stream_length or 2 ** 20, mode) if ys is None else np.asarray(ys, dtype=float)
        self.q = int(config_value("q", 3))
        self.d = int(rows or entropy_rows(eps))
        if self.d % self.q:
            raise ParameterError(f"row count {self.d} must be a multiple of q={self.q}")
        self.powers = np.append(self.ys, 1.0)
        self.y = np.zeros((self.powers.size, self.d))

    @property
    def rows(self):
        return self.y.size

    def column(self, item):
        theta, r = stable_uniforms(self.seed, item, self.d)
        return np.stack([sample_p_stable(StableParams(float(p)), theta, r) for p in self.powers])

    def update(self, item, delta=1):
        self.y += delta * self.column(item)

    def moments(self, y=None):
        y = self.y if y is None else y.reshape(self.powers.size, self.d)
        return np.array([li_terms(y[i], float(p), self.q).mean() for i, p in enumerate(self.powers)])

    def estimate(self, y=None):
        moments = self.moments(y)
        if moments[-1] <= 0:
            return 0.0
        return interpolate_entropy(self.ys, moments[:-1], moments[-1])
