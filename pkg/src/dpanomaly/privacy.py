"""Closed-form privacy math.

Gaussian-mechanism calibration, a Renyi-DP accountant for the subsampled
Gaussian mechanism, the outlier loss-gap lower bound and the empirical
uniform-convergence gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

INTEGER_ORDERS: tuple[float, ...] = tuple(float(a) for a in range(2, 65))
FRACTIONAL_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75)
DEFAULT_ORDERS: tuple[float, ...] = FRACTIONAL_ORDERS + INTEGER_ORDERS


def gaussian_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Noise standard deviation of the classic Gaussian mechanism.

    Only valid for ``epsilon`` in (0, 1).
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1) for the closed form, got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if sensitivity <= 0:
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    return sensitivity / epsilon * math.sqrt(2.0 * math.log(1.25 / delta))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log of sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2))."""
    if q == 1.0:
        return alpha * (alpha - 1) / (2.0 * sigma**2)
    k = np.arange(alpha + 1, dtype=np.float64)
    terms = (
        gammaln(alpha + 1.0)
        - gammaln(k + 1.0)
        - gammaln(alpha - k + 1.0)
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
        + k * (k - 1.0) / (2.0 * sigma**2)
    )
    return float(logsumexp(terms))


def _log_a(q: float, sigma: float, alpha: float) -> float:
    if float(alpha).is_integer():
        return _log_a_int(q, sigma, int(alpha))
    # log A is convex in alpha, so the chord between integer neighbours
    # upper-bounds it; log A_1 = 0.
    lo, hi = math.floor(alpha), math.ceil(alpha)
    a_lo = 0.0 if lo == 1 else _log_a_int(q, sigma, lo)
    a_hi = _log_a_int(q, sigma, hi)
    t = alpha - lo
    return (1.0 - t) * a_lo + t * a_hi


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Per-step Renyi divergence bound of order ``alpha`` for Poisson-subsampled Gaussian noise.

    ``sigma`` is the noise multiplier (noise std divided by the clipping bound).
    Integer orders use the exact binomial expansion; fractional orders in
    between interpolate the log-moment linearly.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling rate must lie in (0, 1], got {q}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if alpha <= 1:
        raise ValueError(f"order must exceed 1, got {alpha}")
    if q == 1.0 and float(alpha).is_integer():
        return alpha / (2.0 * sigma**2)
    # fractional orders interpolate for every q, so epsilon stays monotone in q
    return max(_log_a(q, sigma, alpha) / (alpha - 1.0), 0.0)


def _log_a_ints(q: float, sigma: float, alphas: np.ndarray) -> np.ndarray:
    """``_log_a_int`` for many integer orders in one masked log-sum-exp."""
    if q == 1.0:
        return alphas * (alphas - 1.0) / (2.0 * sigma**2)
    k = np.arange(alphas.max() + 1, dtype=np.float64)[None, :]
    a = alphas[:, None]
    with np.errstate(invalid="ignore"):
        terms = (
            gammaln(a + 1.0)
            - gammaln(k + 1.0)
            - gammaln(np.maximum(a - k, 0.0) + 1.0)
            + (a - k) * math.log1p(-q)
            + k * math.log(q)
            + k * (k - 1.0) / (2.0 * sigma**2)
        )
    terms = np.where(k <= a, terms, -np.inf)
    return logsumexp(terms, axis=1)


def rdp_grid(q: float, sigma: float, orders) -> np.ndarray:
    """``rdp_subsampled_gaussian`` over a whole order grid; non-finite values become +inf."""
    orders = np.asarray(orders, dtype=np.float64)
    if np.any(orders <= 1):
        raise ValueError("orders must exceed 1")
    ints = np.unique(np.concatenate([np.floor(orders), np.ceil(orders)]))
    ints = ints[ints >= 2]
    with np.errstate(over="ignore", invalid="ignore"):
        log_a = dict(zip(ints.tolist(), _log_a_ints(q, sigma, ints).tolist()))
    log_a[1.0] = 0.0
    out = np.empty(len(orders))
    for i, a in enumerate(orders):
        lo, hi = math.floor(a), math.ceil(a)
        t = a - lo
        v = log_a[float(hi)] if lo == hi else (1.0 - t) * log_a[float(lo)] + t * log_a[float(hi)]
        out[i] = max(v / (a - 1.0), 0.0) if math.isfinite(v) else math.inf
    return out


@dataclass
class AccountantState:
    """Composition of ``steps`` subsampled-Gaussian releases."""

    q: float
    sigma: float
    delta: float = 1e-5
    steps: int = 0
    orders: tuple[float, ...] = DEFAULT_ORDERS
    _rdp: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.q}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    def per_step(self) -> np.ndarray:
        if self._rdp is None:
            self._rdp = rdp_grid(self.q, self.sigma, self.orders)
        return self._rdp

    def step(self, n: int = 1) -> AccountantState:
        if n < 0:
            raise ValueError("cannot un-compose steps")
        self.steps += n
        return self

    def epsilon(self) -> float:
        return accountant_epsilon(self)


def accountant_epsilon(state: AccountantState) -> float:
    """Smallest ``steps * rdp(a) + ln(1/delta) / (a - 1)`` over the order grid."""
    if state.steps == 0:
        return 0.0
    orders = np.asarray(state.orders, dtype=np.float64)
    rdp = state.per_step()
    with np.errstate(over="ignore", invalid="ignore"):
        eps = state.steps * rdp + math.log(1.0 / state.delta) / (orders - 1.0)
    eps = eps[np.isfinite(eps)]
    return float(eps.min()) if eps.size else math.inf


def outlier_gap_bound(
    T: float, xi: float, n: int, epsilon: float, delta: float, c: int, gamma: float
) -> float:
    """Lower bound on the expected loss gap between an outlier and normal data.

    The result may be negative, in which case the bound says nothing.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if n < 1 or c < 0 or xi < 0 or epsilon < 0 or delta < 0:
        raise ValueError("n >= 1 and non-negative xi, epsilon, delta, c required")
    concentration = math.sqrt(n * (math.expm1(epsilon) + delta) ** 2 / 2.0 * math.log(2.0 / gamma))
    group = math.expm1(c * epsilon) + c * math.exp(c * epsilon) * delta
    return T - 2.0 * (xi + concentration + group)


@dataclass(frozen=True)
class UaermMeasurement:
    avg_losses: np.ndarray
    oracle_losses: np.ndarray
    gap: float


def uaerm_gap(avg_losses, oracle_losses) -> float:
    """Largest per-sample absolute difference between averaged and oracle losses."""
    a = np.asarray(avg_losses, dtype=np.float64)
    o = np.asarray(oracle_losses, dtype=np.float64)
    if a.shape != o.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {o.shape}")
    if a.size == 0:
        return 0.0
    if not (np.isfinite(a).all() and np.isfinite(o).all()):
        raise ValueError("losses must be finite")
    return float(np.max(np.abs(a - o)))


def measure_uaerm(avg_losses, oracle_losses) -> UaermMeasurement:
    a = np.asarray(avg_losses, dtype=np.float64)
    o = np.asarray(oracle_losses, dtype=np.float64)
    return UaermMeasurement(a, o, uaerm_gap(a, o))
