"""Session utilities and the Werner/fidelity algebra they are built on.

Every utility here has the form ``log R + (something of the Werner values)``,
so the rate derivative is always ``1/R`` and its inverse is ``1/s``. The
Werner part is what distinguishes the kinds:

* ``skr``: log of the BB84 key fraction ``1 - 2 h((1 - W)/2)``
* ``neg``: log of ``3W - 1`` (entanglement negativity)
* ``logprod``: ``sum_l a_l log w_l``, a strictly concave stand-in used to
  exercise the concave-case stability results.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np
from scipy import optimize, special


class UtilityKind(str, Enum):
    SKR = "skr"
    NEG = "neg"
    LOGPROD = "logprod"

    @classmethod
    def parse(cls, value) -> UtilityKind:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown utility {value!r} (expected one of {names})") from None


class UtilityDomainError(ValueError):
    """Werner value below the region where the utility is defined."""


class RateDomainError(ValueError):
    """Non-positive rate or price sum."""


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def binary_entropy(p):
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("binary entropy needs p in [0, 1]")
    return _out((special.entr(p) + special.entr(1.0 - p)) / math.log(2.0))


def skr_fraction(W):
    """BB84 key fraction per delivered pair; may be negative."""
    return _out(1.0 - 2.0 * np.asarray(binary_entropy((1.0 - np.asarray(W, float)) / 2.0)))


def _skr_root() -> float:
    return optimize.bisect(skr_fraction, 0.5, 0.99, xtol=1e-15, rtol=4 * np.finfo(float).eps)


SKR_MIN_W = _skr_root()  # W where the key fraction reaches zero (about 0.78)
NEG_MIN_W = 1.0 / 3.0


def domain_floor(kind: UtilityKind) -> float:
    kind = UtilityKind.parse(kind)
    if kind is UtilityKind.SKR:
        return SKR_MIN_W
    if kind is UtilityKind.NEG:
        return NEG_MIN_W
    return 0.0


def e2e_werner(wv) -> float:
    wv = np.asarray(wv, dtype=float)
    if wv.size == 0:
        raise ValueError("Werner vector is empty")
    if np.any((wv < 0) | (wv > 1)):
        raise ValueError("Werner parameters must lie in [0, 1]")
    return float(np.prod(wv))


def fidelity_from_werner(W):
    W = np.asarray(W, dtype=float)
    if np.any((W < 0) | (W > 1)):
        raise ValueError("Werner parameter must lie in [0, 1]")
    return _out((3.0 * W + 1.0) / 4.0)


def werner_from_fidelity(F):
    F = np.asarray(F, dtype=float)
    if np.any((F < 0.25) | (F > 1)):
        raise ValueError("fidelity must lie in [1/4, 1]")
    return _out((4.0 * F - 1.0) / 3.0)


def k_threshold(f_min: float) -> float:
    """Log of the minimum end-to-end Werner parameter implied by ``f_min``."""
    if not f_min > 0.25:
        raise ValueError("F_min must exceed 1/4")
    if f_min > 1:
        raise ValueError("F_min cannot exceed 1")
    return math.log((4.0 * f_min - 1.0) / 3.0)


def pair_factor(kind, W):
    """Per-pair value ``g(W)`` whose log is the Werner part of the utility."""
    kind = UtilityKind.parse(kind)
    if kind is UtilityKind.SKR:
        return skr_fraction(W)
    if kind is UtilityKind.NEG:
        return _out(3.0 * np.asarray(W, float) - 1.0)
    raise ValueError("logprod has no per-pair factor")


def _check_rate(rate):
    if np.any(np.asarray(rate) <= 0):
        raise RateDomainError("rate must be positive")


def _check_werner(kind, W):
    W = np.asarray(W, dtype=float)
    if np.any((W < 0) | (W > 1)):
        raise ValueError("Werner parameter must lie in [0, 1]")
    floor = domain_floor(kind)
    if np.any(W <= floor):
        raise UtilityDomainError(f"fidelity below {kind.value} utility domain (W <= {floor:.6g})")
    return W


def utility_value(kind, rate, werner, weights=None):
    """Utility of one session.

    ``werner`` is the end-to-end value ``W`` for ``skr``/``neg``. For
    ``logprod`` it is the per-link vector, with ``weights`` the per-link
    ``a_l`` (all ones when omitted).
    """
    kind = UtilityKind.parse(kind)
    _check_rate(rate)
    if kind is UtilityKind.LOGPROD:
        w = np.atleast_1d(np.asarray(werner, dtype=float))
        if np.any(w <= 0):
            raise UtilityDomainError("logprod needs every w_l > 0")
        a = np.ones_like(w) if weights is None else np.asarray(weights, float)
        return float(math.log(rate) + np.dot(a, np.log(w)))
    W = _check_werner(kind, werner)
    return _out(np.log(np.asarray(rate, float) * np.asarray(pair_factor(kind, W))))


def rate_derivative(kind, rate):
    UtilityKind.parse(kind)
    _check_rate(rate)
    return _out(1.0 / np.asarray(rate, float))


def rate_inverse(kind, price_sum):
    UtilityKind.parse(kind)
    if np.any(np.asarray(price_sum) <= 0):
        raise RateDomainError("price sum must be positive to invert the rate derivative")
    return _out(1.0 / np.asarray(price_sum, float))


def werner_derivative(kind, W, a: float = 1.0):
    """``dU/dW`` at end-to-end Werner value ``W``.

    For ``logprod`` this assumes one weight ``a`` shared by every link on the
    path, in which case the Werner part is ``a log W``.
    """
    kind = UtilityKind.parse(kind)
    if kind is UtilityKind.LOGPROD:
        W = np.asarray(W, float)
        if np.any(W <= 0):
            raise UtilityDomainError("logprod needs W > 0")
        return _out(a / W)
    W = _check_werner(kind, W)
    if kind is UtilityKind.NEG:
        return _out(3.0 / (3.0 * W - 1.0))
    with np.errstate(divide="ignore"):
        slope = np.log2((1.0 + W) / (1.0 - W))
    return _out(slope / np.asarray(skr_fraction(W)))


def wu_prime(kind, W, a: float = 1.0):
    """``W * dU/dW``, the quantity sessions publish for link controllers."""
    return _out(np.asarray(W, float) * np.asarray(werner_derivative(kind, W, a)))


def link_derivative(kind, W, w_l, a_l: float = 1.0):
    """``dU/dw_l`` for a link on the session's path (``f_l``)."""
    kind = UtilityKind.parse(kind)
    w_l = np.asarray(w_l, float)
    if np.any(w_l <= 0):
        raise UtilityDomainError("w_l must be positive")
    if kind is UtilityKind.LOGPROD:
        return _out(a_l / w_l)
    return _out(np.asarray(wu_prime(kind, W)) / w_l)


def link_second_derivative(kind, W, w_l, a_l: float = 1.0):
    """``d^2U/dw_l^2`` with the other links on the path held fixed.

    Writing ``P = W / w_l`` and ``U = log g(P w_l)``, this is
    ``P^2 (g''/g - (g'/g)^2)`` evaluated at ``W``.
    """
    kind = UtilityKind.parse(kind)
    w_l = np.asarray(w_l, float)
    if kind is UtilityKind.LOGPROD:
        return _out(-a_l / w_l**2)
    W = _check_werner(kind, W)
    P = W / w_l
    g = np.asarray(pair_factor(kind, W))
    if kind is UtilityKind.NEG:
        g1, g2 = 3.0, 0.0
    else:
        g1 = np.log2((1.0 + W) / (1.0 - W))
        g2 = 2.0 / (math.log(2.0) * (1.0 - W**2))
    return _out(P**2 * (g2 / g - (g1 / g) ** 2))


def clip_werner(kind, W, margin: float = 1e-3):
    """Pull ``W`` into ``[floor + margin, 1 - 1e-9]`` for derivative evaluation.

    Controllers use this when a transient pushes the end-to-end Werner value
    out of the utility's domain. Near the floor the SKR and NEG slopes blow
    up, so the clipped slope acts as a strong restoring force on ``w``.
    """
    kind = UtilityKind.parse(kind)
    lo = domain_floor(kind) + margin if kind is not UtilityKind.LOGPROD else 1e-9
    return _out(np.clip(np.asarray(W, float), lo, 1.0 - 1e-9))


def wu_prime_clipped(kind: UtilityKind, W: np.ndarray) -> np.ndarray:
    """Unchecked, array-only ``W * dU/dW`` at ``clip_werner(W)`` for the hot loops."""
    if kind is UtilityKind.LOGPROD:
        raise ValueError("logprod has no end-to-end slope")
    W = np.clip(W, domain_floor(kind) + 1e-3, 1.0 - 1e-9)
    if kind is UtilityKind.NEG:
        return 3.0 * W / (3.0 * W - 1.0)
    p = 0.5 * (1.0 - W)
    h = -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))
    return W * np.log2((1.0 + W) / (1.0 - W)) / (1.0 - 2.0 * h)


_LN2 = math.log(2.0)


def _h2(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log(p) + (1.0 - p) * math.log1p(-p)) / _LN2


def pair_factor_scalar(kind: UtilityKind, W: float) -> float:
    """Float-only ``max(0, g(W))`` used when scoring delivered pairs."""
    if kind is UtilityKind.SKR:
        return max(0.0, 1.0 - 2.0 * _h2(0.5 * (1.0 - W)))
    if kind is UtilityKind.NEG:
        return max(0.0, 3.0 * W - 1.0)
    raise ValueError("logprod has no per-pair factor")


def wu_prime_scalar(kind: UtilityKind, W: float, a: float = 1.0) -> float:
    """Float-only ``W * dU/dW`` at ``clip_werner(W)``; ``a`` for logprod."""
    if kind is UtilityKind.LOGPROD:
        return a
    if kind is UtilityKind.NEG:
        W = min(max(W, NEG_MIN_W + 1e-3), 1.0 - 1e-9)
        return 3.0 * W / (3.0 * W - 1.0)
    W = min(max(W, SKR_MIN_W + 1e-3), 1.0 - 1e-9)
    g = 1.0 - 2.0 * _h2(0.5 * (1.0 - W))
    return W * math.log2((1.0 + W) / (1.0 - W)) / g
