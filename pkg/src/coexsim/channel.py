"""Propagation and rate mapping.

Everything here is interference-limited: there is no noise term, and an
empty interferer set yields ``INTERFERENCE_FREE`` (``math.inf``), which the
rate map turns into the peak rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_distance

INTERFERENCE_FREE = math.inf


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class PathlossModel:
    """PL = intercept + dist_slope*log10(d) + freq_slope*log10(f_GHz).

    Defaults are the 3GPP urban-micro NLOS coefficients (36.7, 22.7, 26).
    """

    intercept_db: float = 22.7
    dist_slope_db: float = 36.7
    freq_slope_db: float = 26.0
    alpha: float = 3.67
    min_distance: float = 10.0
    shadowing_db: float = 0.0

    def __post_init__(self):
        if not math.isclose(self.dist_slope_db, 10 * self.alpha, rel_tol=1e-9):
            raise ChannelError("dist_slope_db must equal 10*alpha")
        if self.alpha <= 2:
            raise ChannelError("alpha must exceed 2")
        if self.min_distance <= 0:
            raise ChannelError("min_distance must be positive")
        if self.shadowing_db < 0:
            raise ChannelError("shadowing_db must be >= 0")


@dataclass(frozen=True)
class RateMap:
    """Truncated Shannon map from SIR to bits/s, capped at peak_rate."""

    peak_rate: float
    bandwidth: float = 20e6
    attenuation: float = 0.75
    sir_floor: float = 0.1

    def __post_init__(self):
        if not 0 < self.attenuation <= 1:
            raise ChannelError("attenuation must lie in (0, 1]")
        if self.bandwidth <= 0 or self.peak_rate <= 0:
            raise ChannelError("bandwidth and peak_rate must be positive")
        if self.sir_floor < 0:
            raise ChannelError("sir_floor must be >= 0")


def pathloss_db(model: PathlossModel, distance, carrier):
    if np.any(np.asarray(carrier) <= 0):
        raise ChannelError("carrier frequency must be positive")
    d = np.maximum(np.asarray(distance, dtype=float), model.min_distance)
    f_ghz = np.asarray(carrier, dtype=float) / 1e9
    pl = model.intercept_db + model.dist_slope_db * np.log10(d) + model.freq_slope_db * np.log10(f_ghz)
    return pl if np.ndim(pl) else float(pl)


def received_power(tx_power, pl_db):
    out = np.asarray(tx_power, dtype=float) * 10.0 ** (-np.asarray(pl_db, dtype=float) / 10.0)
    return out if np.ndim(out) else float(out)


def gain(model: PathlossModel, distance, carrier):
    """Linear channel gain 10^(-PL/10)."""
    return received_power(1.0, pathloss_db(model, distance, carrier))


def sir_from_powers(signal, interference):
    """Elementwise S/I, with I == 0 mapped to INTERFERENCE_FREE."""
    signal = np.asarray(signal, dtype=float)
    interference = np.asarray(interference, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(interference > 0, signal / np.where(interference > 0, interference, 1.0), INTERFERENCE_FREE)
    return out if out.ndim else float(out)


def sir(deployment, user: int, active, model: PathlossModel, serving: int | None = None, power_scale=None):
    """SIR at one user against a set of active co-band node ids.

    ``serving`` defaults to the user's associated node; ``power_scale`` is an
    optional per-node multiplier on tier transmit power.
    """
    if serving is None:
        serving = int(deployment.serving[user])
    if not 0 <= serving < deployment.n_nodes:
        raise ChannelError(f"serving node {serving} not in deployment")
    upos = deployment.user_positions[user]
    powers = np.array([t.tx_power for t in deployment.tiers])[deployment.tier]
    carriers = np.array([t.carrier for t in deployment.tiers])[deployment.tier]
    if power_scale is not None:
        powers = powers * np.asarray(power_scale, dtype=float)
    # ratios to the serving power keep SIR unchanged under common rescaling
    powers = powers / powers[serving]
    active = np.array([a for a in np.asarray(active, dtype=int).ravel() if a != serving], dtype=int)
    d_s = wrap_distance(upos, deployment.positions[serving], deployment.region)
    s = received_power(powers[serving], pathloss_db(model, d_s, carriers[serving]))
    if len(active) == 0:
        return INTERFERENCE_FREE
    d_i = wrap_distance(upos[None, :], deployment.positions[active], deployment.region)
    i = np.sum(received_power(powers[active], pathloss_db(model, d_i, carriers[active])))
    return float(sir_from_powers(s, i))


def rate(sir_value, rate_map: RateMap):
    """Bits/s for an SIR (linear); works elementwise on arrays."""
    x = np.asarray(sir_value, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        shannon = rate_map.attenuation * rate_map.bandwidth * np.log2(1.0 + np.where(np.isinf(x), 0.0, x))
    out = np.where(np.isinf(x), rate_map.peak_rate, np.minimum(rate_map.peak_rate, shannon))
    out = np.where(x < rate_map.sir_floor, 0.0, out)
    return out if out.ndim else float(out)


def db(x):
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(np.asarray(x, dtype=float))
    return out if np.ndim(out) else float(out)


def undb(x):
    out = 10.0 ** (np.asarray(x, dtype=float) / 10.0)
    return out if np.ndim(out) else float(out)
