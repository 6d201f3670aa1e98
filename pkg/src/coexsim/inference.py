"""Spectrum-sensing inference of co-channel transmitter density and SIR.

Under a PPP of transmitters with density lam and power P outside an
exclusion radius h, with pathloss r**-alpha, the mean aggregate power at the
sensor is

    E[P_f] = 2*pi*lam*P * h**(2 - alpha) / (alpha - 2).

Writing Q(h, alpha) = sqrt(2*pi/(alpha - 2)) * h**((2 - alpha)/2) gives
E[P_f] = lam * P * Q**2, so (sqrt(P_f/P)/Q)**2 is an unbiased density
estimate, and rescaling the mean interference from radius h to radius d
multiplies it by (Q(d)/Q(h))**2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

from .channel import INTERFERENCE_FREE, PathlossModel, gain
from .geometry import Region, TierSpec, wrap_distance

SQUARED = "squared"
LITERAL = "literal"


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class SensorReading:
    band: int
    power: float
    sensor_offset: float

    def __post_init__(self):
        if self.power < 0:
            raise InferenceError("sensed power must be >= 0")
        if self.sensor_offset <= 0:
            raise InferenceError("sensor offset must be > 0")


@dataclass(frozen=True)
class DensityEstimate:
    band: int
    lambda_hat: float
    calibration: float = 1.0


@dataclass(frozen=True)
class QFactor:
    h: float
    alpha: float
    value: float


def q_factor(h: float, alpha: float) -> QFactor:
    if alpha <= 2:
        raise InferenceError("divergent interference regime (alpha must exceed 2)")
    if h <= 0:
        raise InferenceError("distance must be positive")
    value = math.sqrt(2 * math.pi / (alpha - 2)) * h ** ((2 - alpha) / 2)
    return QFactor(h, alpha, value)


def mean_sensed_power(lam: float, tx_power: float, h: float, alpha: float) -> float:
    """Closed-form mean aggregate power beyond radius h (unit-intercept pathloss)."""
    return lam * tx_power * q_factor(h, alpha).value ** 2


def estimate_density(
    reading: SensorReading,
    tier_power: float,
    alpha: float,
    calibration: float = 1.0,
    form: str = SQUARED,
) -> DensityEstimate:
    if tier_power <= 0:
        raise InferenceError("tier power must be positive")
    q = q_factor(reading.sensor_offset, alpha).value
    root = math.sqrt(reading.power / tier_power) / q
    if form == SQUARED:
        lam = root * root
    elif form == LITERAL:
        lam = root
    else:
        raise InferenceError(f"unknown estimator form {form!r}")
    return DensityEstimate(reading.band, calibration * lam, calibration)


def estimate_sir(reading: SensorReading, signal_strength: float, d: float, alpha: float) -> float:
    """Inferred SIR at distance d from the sensing cell.

    ``signal_strength`` is the received signal strength of the served user.
    With a fixed signal strength the estimate grows with d (interference is
    assumed to lie beyond radius d); passing the distance-dependent signal
    P*d**-alpha makes it decrease with d.
    """
    if d <= 0:
        raise InferenceError("distance must be positive")
    if signal_strength <= 0:
        raise InferenceError("signal strength must be positive")
    if reading.power == 0:
        return INTERFERENCE_FREE
    ratio = q_factor(reading.sensor_offset, alpha).value / q_factor(d, alpha).value
    return signal_strength * ratio * ratio / reading.power


def sense_power(
    sensor,
    band: int,
    positions: np.ndarray,
    tx_power: np.ndarray,
    active: np.ndarray,
    model: PathlossModel,
    region: Region,
    carriers: np.ndarray | float = 2.4e9,
    exclude: Sequence[int] = (),
    sensor_offset: float = 1.0,
) -> SensorReading:
    """Aggregate received power at a sensor from active co-band transmitters.

    ``active`` is a boolean mask (or index list) over ``positions`` of nodes
    transmitting on ``band``; ``exclude`` removes the sensor's own cell.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    mask = np.zeros(len(positions), dtype=bool)
    active = np.asarray(active)
    if active.dtype == bool:
        mask |= active
    elif active.size:
        mask[active.astype(int)] = True
    mask[list(exclude)] = False
    if not mask.any():
        return SensorReading(band, 0.0, sensor_offset)
    d = wrap_distance(np.asarray(sensor, dtype=float)[None, :], positions[mask], region)
    carriers = np.broadcast_to(np.asarray(carriers, dtype=float), (len(positions),))[mask]
    power = np.broadcast_to(np.asarray(tx_power, dtype=float), (len(positions),))[mask]
    total = float(np.sum(power * gain(model, d, carriers)))
    return SensorReading(band, total, sensor_offset)


def estimate_tier_activity(
    readings: Sequence[SensorReading],
    tiers: Sequence[TierSpec],
    signatures,
    alpha: float,
    calibration: float = 1.0,
) -> np.ndarray:
    """Split per-band sensed power into per-tier activity fractions.

    ``signatures[b][k]`` is the fraction of tier k's nodes occupying band b.
    Each band's reading is converted to a unit-power density and the result
    is decomposed by non-negative least squares against
    signature * density * tx_power, then clamped to [0, 1].
    """
    sig = np.asarray(signatures, dtype=float)
    n_bands, n_tiers = len(readings), len(tiers)
    if sig.shape != (n_bands, n_tiers):
        raise InferenceError(f"signature matrix must be {n_bands}x{n_tiers}")
    if n_bands < n_tiers:
        raise InferenceError("tiers not separable: fewer bands than tiers")
    A = sig * np.array([t.density * t.tx_power for t in tiers])[None, :]
    if np.linalg.matrix_rank(A) < n_tiers:
        raise InferenceError("tiers not separable")
    y = np.array([estimate_density(r, 1.0, alpha, calibration).lambda_hat for r in readings])
    if not np.any(y > 0):
        return np.zeros(n_tiers)
    scale = np.linalg.norm(A, axis=0)
    x, _ = nnls(A / scale, y)
    return np.clip(x / scale, 0.0, 1.0)


def ppp_power_draws(
    lam: float,
    tx_power: float,
    inner: float,
    alpha: float,
    draws: int,
    rng: np.random.Generator,
    outer: float | None = None,
    chunk: int = 2_000_000,
    power_at=None,
) -> np.ndarray:
    """Brute-force aggregate power at the origin from a PPP on an annulus.

    Points of density ``lam`` are dropped in inner <= r < outer and their
    powers ``tx_power * r**-alpha`` summed, once per draw. Only the radius
    matters for the sum, so angles are not sampled. ``power_at(r)`` overrides
    the bare power law.
    """
    if outer is None:
        outer = default_outer_radius(inner, alpha)
    area = math.pi * (outer * outer - inner * inner)
    counts = rng.poisson(lam * area, size=draws)
    out = np.zeros(draws)
    start = 0
    while start < draws:
        # group draws so one batch holds about `chunk` points
        cum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(cum, chunk, side="right")))
        c = counts[start:stop]
        n = int(c.sum())
        if n:
            u = rng.random(n)
            r2 = inner * inner + u * (outer * outer - inner * inner)
            if power_at is None:
                p = tx_power * r2 ** (-alpha / 2)
            else:
                p = power_at(np.sqrt(r2))
            idx = np.repeat(np.arange(stop - start), c)
            out[start:stop] = np.bincount(idx, weights=p, minlength=stop - start)
        start = stop
    return out


def default_outer_radius(inner: float, alpha: float, truncation: float = 0.02) -> float:
    """Radius beyond which the neglected mean power is ``truncation`` of the total."""
    return inner * truncation ** (-1.0 / (alpha - 2))


def fit_calibration(
    alpha: float,
    h: float,
    lam: float,
    tx_power: float,
    draws: int,
    rng: np.random.Generator,
    model: PathlossModel | None = None,
    carrier: float = 2.4e9,
    form: str = SQUARED,
) -> float:
    """Constant mapping raw estimates onto the true density for one setup.

    With ``model`` given, powers follow that pathloss (intercept and distance
    clamp included) rather than the bare r**-alpha law the estimator assumes;
    the fitted constant absorbs the mismatch.
    """
    outer = default_outer_radius(h, alpha)
    if model is None:
        powers = ppp_power_draws(lam, tx_power, h, alpha, draws, rng, outer)
    else:
        powers = _pathloss_power_draws(lam, tx_power, h, outer, draws, rng, model, carrier)
    mean_p = float(np.mean(powers))
    raw = estimate_density(SensorReading(0, mean_p, h), tx_power, alpha, 1.0, form).lambda_hat
    if raw <= 0:
        raise InferenceError("no power sensed; cannot calibrate")
    return lam / raw


def _pathloss_power_draws(lam, tx_power, inner, outer, draws, rng, model, carrier):
    return ppp_power_draws(
        lam, tx_power, inner, model.alpha, draws, rng, outer,
        power_at=lambda r: tx_power * gain(model, r, carrier),
    )
