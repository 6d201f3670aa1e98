"""Scenario orchestration: seeded drops, load sweeps, scheme comparisons, output.

Seeds: drop k of a run with master seed m uses ``SeedSequence([m, k])``,
spawned into independent streams for the deployment, the Wi-Fi channel draw,
the scheme's own randomness and the MAC. Everything that differs between two
runs of the same drop (load, scheme, ABS rate) only touches the last two
streams, so deployments are shared exactly across compared settings.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import types
import typing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli
import tomli_w

from . import __version__
from .channel import PathlossModel, RateMap, gain, undb
from .geometry import (
    LTE_SCHEDULED,
    WIFI_CONTENTION,
    Deployment,
    Region,
    TierSpec,
    sample_deployment,
    wrap_distance,
)
from .inference import (
    LITERAL,
    SQUARED,
    SensorReading,
    default_outer_radius,
    estimate_density,
    estimate_sir,
    estimate_tier_activity,
    fit_calibration,
    ppp_power_draws,
    sense_power,
)
from .mac import ChannelModels, ContentionParams, DropSimulator, dbm_to_watts, link_budget, received_power_matrix
from .mitigation import (
    HFR1,
    HFR3,
    PRIORITY_POLICIES,
    SCHEMES,
    SFR,
    SGC,
    UNCOORDINATED,
    BandPlan,
    assign_hfr,
    assign_sfr,
    channel_plan,
    full_band_plan,
    demand_for,
    pair_cells,
    sgc_select,
    uncoordinated_order,
    uncoordinated_plan,
)

SWEEP = "sweep"
CAPACITY = "capacity"
DELIVERED = "delivered"
CSV_COLUMNS = ("scheme", "load", "tier", "mean_tput_mbps", "ci95_lo", "ci95_hi", "drops")
INFER_COLUMNS = ("alpha", "h", "true_lambda", "mean_lambda_hat", "rel_error", "trials")
Z95 = 1.959963984540054


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
        self.message = message


class DropError(RuntimeError):
    def __init__(self, drop: int, cause: Exception):
        super().__init__(f"drop {drop}: {cause}")
        self.drop = drop


# -- configuration -----------------------------------------------------------


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


@dataclass(frozen=True)
class RegionConfig:
    width_m: float = 1500.0
    height_m: float = 1500.0
    boundary: str = "torus"

    def __post_init__(self):
        _check(self.width_m > 0, "width_m", "must be > 0")
        _check(self.height_m > 0, "height_m", "must be > 0")
        _check(self.boundary in ("torus", "guard"), "boundary", "must be 'torus' or 'guard'")

    def build(self) -> Region:
        return Region(self.width_m, self.height_m, self.boundary)


@dataclass(frozen=True)
class TierConfig:
    """One tier; ``load`` is a fixed fraction or "sweep" to follow the load grid."""

    name: str
    density_per_km2: float
    tx_power_w: float
    carrier_mhz: float
    peak_rate_mbps: float
    protocol: str
    load: float | str = SWEEP

    def __post_init__(self):
        _check(bool(self.name) and "," not in self.name, "name", "must be non-empty without commas")
        _check(self.density_per_km2 >= 0, "density_per_km2", "must be >= 0")
        _check(self.tx_power_w > 0, "tx_power_w", "must be > 0")
        _check(self.carrier_mhz > 0, "carrier_mhz", "must be > 0")
        _check(self.peak_rate_mbps > 0, "peak_rate_mbps", "must be > 0")
        _check(self.protocol in (LTE_SCHEDULED, WIFI_CONTENTION), "protocol",
               f"must be {LTE_SCHEDULED!r} or {WIFI_CONTENTION!r}")
        if isinstance(self.load, str):
            _check(self.load == SWEEP, "load", "must be a fraction in [0, 1] or 'sweep'")
        else:
            _check(0.0 <= self.load <= 1.0, "load", "must lie in [0, 1]")

    def spec(self) -> TierSpec:
        return TierSpec(self.name, self.density_per_km2 * 1e-6, self.tx_power_w,
                        self.carrier_mhz * 1e6, self.peak_rate_mbps * 1e6, self.protocol)


DEFAULT_TIERS = (
    TierConfig("lte", 3.0, 40.0, 2100.0, 84.0, LTE_SCHEDULED, SWEEP),
    TierConfig("wifi", 300.0, 1.0, 2400.0, 65.0, WIFI_CONTENTION, 1.0),
)


@dataclass(frozen=True)
class PathlossConfig:
    intercept_db: float = 22.7
    dist_slope_db: float = 36.7
    freq_slope_db: float = 26.0
    alpha: float = 3.67
    min_distance_m: float = 10.0
    shadowing_db: float = 0.0

    def __post_init__(self):
        _check(self.alpha > 2, "alpha", "must exceed 2")
        _check(math.isclose(self.dist_slope_db, 10 * self.alpha, rel_tol=1e-9), "dist_slope_db", "must equal 10*alpha")
        _check(self.min_distance_m > 0, "min_distance_m", "must be > 0")
        _check(self.shadowing_db >= 0, "shadowing_db", "must be >= 0")

    def build(self) -> PathlossModel:
        return PathlossModel(self.intercept_db, self.dist_slope_db, self.freq_slope_db,
                             self.alpha, self.min_distance_m, self.shadowing_db)


@dataclass(frozen=True)
class RateMapConfig:
    bandwidth_mhz: float = 20.0
    attenuation: float = 0.75
    sir_floor_db: float = -10.0

    def __post_init__(self):
        _check(self.bandwidth_mhz > 0, "bandwidth_mhz", "must be > 0")
        _check(0 < self.attenuation <= 1, "attenuation", "must lie in (0, 1]")

    def build(self, peak_rate: float) -> RateMap:
        return RateMap(peak_rate, self.bandwidth_mhz * 1e6, self.attenuation, float(undb(self.sir_floor_db)))


@dataclass(frozen=True)
class MacConfig:
    cs_threshold_dbm: float = -82.0
    max_backoff: int = 3
    txop: int = 8
    frame_length: int = 10
    sense_in_burst: bool = True

    def __post_init__(self):
        _check(self.max_backoff >= 1, "max_backoff", "must be >= 1")
        _check(self.txop >= 1, "txop", "must be >= 1")
        _check(self.frame_length >= 1, "frame_length", "must be >= 1")

    def build(self) -> ContentionParams:
        return ContentionParams(dbm_to_watts(self.cs_threshold_dbm), self.max_backoff, self.txop, self.sense_in_burst)


@dataclass(frozen=True)
class MitigationConfig:
    sfr_backoff: float = 0.5
    sfr_edge_split: str = "cell"
    priority_policy: str = "random"
    sensor_offset_m: float = 10.0

    def __post_init__(self):
        _check(0 < self.sfr_backoff <= 1, "sfr_backoff", "must lie in (0, 1]")
        _check(self.sfr_edge_split in ("cell", "global"), "sfr_edge_split", "must be 'cell' or 'global'")
        _check(self.priority_policy in PRIORITY_POLICIES, "priority_policy",
               f"must be one of {', '.join(PRIORITY_POLICIES)}")
        _check(self.sensor_offset_m > 0, "sensor_offset_m", "must be > 0")


@dataclass(frozen=True)
class InferenceConfig:
    """Estimator-consistency sweep run by ``infer-validate`` and ``calibrate``.

    ``oracle`` selects the bare r**-alpha law or the configured pathloss for
    the brute-force PPP power sums; ``calibration_file`` points at a sidecar
    written by ``calibrate`` whose per-(alpha, h) constants replace
    ``calibration``.
    """

    alphas: tuple[float, ...] = (3.0, 4.0)
    offsets_m: tuple[float, ...] = (20.0, 50.0, 100.0)
    densities_per_m2: tuple[float, ...] = (1e-5, 1e-4)
    draws: int = 10_000
    tolerance: float = 0.10
    sir_tolerance_db: float = 3.0
    form: str = SQUARED
    calibration: float = 1.0
    calibration_file: str = ""
    oracle: str = "power_law"

    def __post_init__(self):
        _check(len(self.alphas) > 0 and all(a > 2 for a in self.alphas), "alphas", "each must exceed 2")
        _check(len(self.offsets_m) > 0 and all(h > 0 for h in self.offsets_m), "offsets_m", "each must be > 0")
        _check(len(self.densities_per_m2) > 0 and all(x > 0 for x in self.densities_per_m2),
               "densities_per_m2", "each must be > 0")
        _check(self.draws >= 1, "draws", "must be >= 1")
        _check(self.tolerance > 0, "tolerance", "must be > 0")
        _check(self.sir_tolerance_db > 0, "sir_tolerance_db", "must be > 0")
        _check(self.form in (SQUARED, LITERAL), "form", f"must be {SQUARED!r} or {LITERAL!r}")
        _check(self.calibration > 0, "calibration", "must be > 0")
        _check(self.oracle in ("power_law", "pathloss"), "oracle", "must be 'power_law' or 'pathloss'")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run; defaults are the Table 1 values.

    ``metric`` picks what the curves report: ``capacity`` is the achievable
    rate per unit of demand (LTE probe rate, Wi-Fi rate per backlogged
    subframe); ``delivered`` is time-averaged delivered throughput.
    """

    seed: int = 1
    drops: int = 100
    frames_per_drop: int = 200
    abs_rate: float = 0.0
    abs_mode: str = "synchronous"
    scheme: str = HFR1
    subbands: int = 1
    load_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    users_per_cell: int = 1
    metric: str = CAPACITY
    region: RegionConfig = field(default_factory=RegionConfig)
    tiers: tuple[TierConfig, ...] = DEFAULT_TIERS
    pathloss: PathlossConfig = field(default_factory=PathlossConfig)
    rate_map: RateMapConfig = field(default_factory=RateMapConfig)
    mac: MacConfig = field(default_factory=MacConfig)
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        _check(0 <= self.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
        _check(self.drops >= 1, "drops", "must be >= 1")
        _check(self.frames_per_drop >= 1, "frames_per_drop", "must be >= 1")
        _check(0.0 <= self.abs_rate <= 1.0, "abs_rate", "must lie in [0, 1]")
        _check(self.abs_mode in ("synchronous", "independent"), "abs_mode", "must be 'synchronous' or 'independent'")
        _check(self.scheme in SCHEMES, "scheme", f"must be one of {', '.join(SCHEMES)}")
        _check(self.subbands >= 1, "subbands", "must be >= 1")
        if self.scheme in (HFR3, SFR):
            _check(self.subbands % 3 == 0, "subbands", f"must be a multiple of 3 for scheme {self.scheme!r}")
        _check(len(self.load_grid) > 0, "load_grid", "must not be empty")
        _check(all(0.0 <= x <= 1.0 for x in self.load_grid), "load_grid", "values must lie in [0, 1]")
        _check(self.users_per_cell >= 1, "users_per_cell", "must be >= 1")
        _check(self.metric in (CAPACITY, DELIVERED), "metric", f"must be {CAPACITY!r} or {DELIVERED!r}")
        _check(len(self.tiers) > 0, "tiers", "at least one tier must be defined")
        names = [t.name for t in self.tiers]
        _check(len(set(names)) == len(names), "tiers", "tier names must be unique")

    # derived objects
    def tier_specs(self) -> tuple[TierSpec, ...]:
        return tuple(t.spec() for t in self.tiers)

    def channel_models(self) -> ChannelModels:
        return ChannelModels(self.pathloss.build(),
                             tuple(self.rate_map.build(t.peak_rate_mbps * 1e6) for t in self.tiers))

    def tier_loads(self, load: float) -> np.ndarray:
        return np.array([load if t.load == SWEEP else float(t.load) for t in self.tiers])

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _from_mapping(cls, data, "")

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(tomli.loads(text))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


def _from_mapping(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a table")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    for key in data:
        if key not in names:
            raise ConfigError(_join(path, key), "unknown key")
    kwargs = {k: _coerce(hints[k], data[k], _join(path, k)) for k in names if k in data}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(_join(path, e.key), e.message) from None
    except TypeError as e:
        raise ConfigError(path, str(e)) from None


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for option in typing.get_args(tp):
            try:
                return _coerce(option, value, path)
            except ConfigError as e:
                errors.append(e.message)
        raise ConfigError(path, " or ".join(errors))
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, "expected an array")
        item = typing.get_args(tp)[0]
        return tuple(_coerce(item, v, _join(path, i)) for i, v in enumerate(value))
    if is_dataclass(tp):
        return _from_mapping(tp, value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    raise ConfigError(path, f"unsupported type {tp!r}")


def load_calibration(path: str | Path) -> dict[tuple[float, float], float]:
    """Read a ``calibrate`` sidecar: {(alpha, h): constant}."""
    data = tomli.loads(Path(path).read_text())
    return {(float(c["alpha"]), float(c["h"])): float(c["constant"]) for c in data.get("calibration", [])}


def write_calibration(table: dict[tuple[float, float], float], path: str | Path, config: ExperimentConfig) -> None:
    doc = {
        "generator": f"coexsim {__version__}",
        "form": config.inference.form,
        "oracle": config.inference.oracle,
        "calibration": [{"alpha": a, "h": h, "constant": c} for (a, h), c in sorted(table.items())],
    }
    Path(path).write_text(tomli_w.dumps(doc))


# -- one drop ----------------------------------------------------------------


@dataclass
class DropResult:
    """Per-tier cell means for one drop (NaN when the tier has no cell with demand)."""

    drop: int
    load: float
    scheme: str
    capacity: dict[str, float]
    delivered: dict[str, float]
    cells: dict[str, int]
    digest: str
    node_capacity: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    node_throughput: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def value(self, tier: str, metric: str = CAPACITY) -> float:
        return (self.capacity if metric == CAPACITY else self.delivered)[tier]


def drop_streams(seed: int, drop: int) -> list[np.random.SeedSequence]:
    """Deployment, Wi-Fi channel, scheme and MAC seed streams for one drop."""
    return np.random.SeedSequence([seed, drop]).spawn(4)


def build_deployment(config: ExperimentConfig, drop: int) -> Deployment:
    rng = np.random.default_rng(drop_streams(config.seed, drop)[0])
    return sample_deployment(config.tier_specs(), config.region.build(), rng, config.users_per_cell)


def _rows(n: int, s: int):
    return (np.zeros((n, s), dtype=bool), np.ones((n, s)), np.tile(np.arange(s), (n, 1)), np.zeros(n, dtype=bool))


def _place(target, ids, plan: BandPlan) -> None:
    allowed, power, order, shuffle = target
    allowed[ids], power[ids], order[ids], shuffle[ids] = plan.allowed, plan.power, plan.order, plan.shuffle


def build_plan(
    config: ExperimentConfig,
    dep: Deployment,
    scheme: str,
    loads: np.ndarray,
    channel_rng: np.random.Generator,
    scheme_rng: np.random.Generator,
) -> BandPlan:
    """Band plan for every node: the scheme for LTE cells, a channel per AP."""
    n, S = dep.n_nodes, config.subbands
    proto = np.array([dep.tiers[k].protocol for k in dep.tier]) if n else np.zeros(0, dtype=str)
    lte = np.flatnonzero(proto == LTE_SCHEDULED)
    wifi = np.flatnonzero(proto == WIFI_CONTENTION)
    target = _rows(n, S)
    channels = channel_rng.integers(S, size=len(wifi))
    if len(wifi):
        _place(target, wifi, channel_plan(channels, S))
    notes: tuple[str, ...] = ()
    user_mask = None
    if len(lte):
        plan = _lte_plan(config, dep, scheme, loads, lte, wifi, channels, scheme_rng)
        notes = plan.warnings
        _place(target, lte, plan)
        if plan.user_mask is not None:
            user_mask = np.ones((len(dep.serving), S), dtype=bool)
            user_mask[np.isin(dep.serving, lte)] = plan.user_mask
    allowed, power, order, shuffle = target
    return BandPlan(S, allowed, power, order, shuffle, None, notes, user_mask)


def _first_users(dep: Deployment, ids: np.ndarray) -> np.ndarray:
    first = np.full(dep.n_nodes, -1)
    for u in range(len(dep.serving) - 1, -1, -1):
        first[dep.serving[u]] = u
    return first[ids]


def _lte_plan(config, dep, scheme, loads, lte, wifi, channels, rng) -> BandPlan:
    S = config.subbands
    region = dep.region
    model = config.pathloss.build()
    pos = dep.positions[lte]
    L = len(lte)
    if scheme == HFR1:
        return full_band_plan(L, S, shuffle=True)
    if scheme == HFR3:
        return assign_hfr(pos, 3, S, region, model.alpha)
    users = _first_users(dep, lte)
    upos = dep.user_positions[users]
    serving_d = np.maximum(wrap_distance(upos, pos, region), model.min_distance)
    if scheme == SFR:
        lte_users = np.flatnonzero(np.isin(dep.serving, lte))
        user_cell = np.searchsorted(lte, dep.serving[lte_users])
        d_user = np.maximum(wrap_distance(dep.user_positions[lte_users], dep.positions[dep.serving[lte_users]], region),
                            model.min_distance)
        return assign_sfr(pos, d_user, config.mitigation.sfr_backoff, S, region, model.alpha, user_cell, rng,
                          config.mitigation.sfr_edge_split)

    lte_load = float(loads[dep.tier[lte[0]]])
    wifi_load = loads[dep.tier[wifi]] if len(wifi) else np.zeros(0)
    demand = demand_for(lte_load, S)
    if scheme == SGC:
        rx = received_power_matrix(dep, model, upos)  # (L users, all nodes)
        signal = np.repeat(rx[np.arange(L), lte][:, None], S, axis=1)
        base = np.zeros((L, S))
        for s in range(S):
            on = channels == s
            base[:, s] = rx[:, wifi[on]] @ wifi_load[on]
        coupling = rx[:, lte].copy()
        np.fill_diagonal(coupling, 0.0)
        policy = config.mitigation.priority_policy
        weights = rng.random(L) if policy != "random" else None
        pairing = pair_cells(pos, region, rng, policy, weights)
        return sgc_select(pairing, None, demand, signal=signal, base_interference=base, coupling=coupling)
    if scheme == UNCOORDINATED:
        h = config.mitigation.sensor_offset_m
        theta = rng.uniform(0, 2 * np.pi, L)
        sensors = pos + h * np.column_stack([np.cos(theta), np.sin(theta)])
        power = np.array([t.tx_power for t in dep.tiers])[dep.tier]
        carriers = np.array([t.carrier for t in dep.tiers])[dep.tier]
        signal = received_power_matrix(dep, model, upos)[np.arange(L), lte]
        occupied = np.zeros((dep.n_nodes, S))  # expected activity per node and band
        occupied[wifi, channels] = wifi_load
        orders = np.tile(np.arange(S), (L, 1))
        k = max(1, demand)
        for i in rng.permutation(L):
            readings = [
                sense_power(sensors[i], b, dep.positions, power * occupied[:, b], occupied[:, b] > 0,
                            model, region, carriers, exclude=(lte[i],), sensor_offset=h)
                for b in range(S)
            ]
            orders[i] = uncoordinated_order(readings, signal[i], serving_d[i], model.alpha)
            occupied[lte[i], orders[i][:k]] = 1.0
        return uncoordinated_plan(orders)
    raise ConfigError("scheme", f"unknown scheme {scheme!r}")


def run_drop(
    config: ExperimentConfig,
    drop: int,
    load: float | None = None,
    scheme: str | None = None,
    abs_rate: float | None = None,
    trace=None,
    ctx: _DropContext | None = None,
) -> DropResult:
    """Simulate one drop; deterministic in (config, drop, load, scheme, abs_rate)."""
    load = config.load_grid[0] if load is None else load
    scheme = config.scheme if scheme is None else scheme
    abs_rate = config.abs_rate if abs_rate is None else abs_rate
    try:
        return _run_drop(config, drop, load, scheme, abs_rate, trace, ctx)
    except (ConfigError, DropError):
        raise
    except Exception as e:  # noqa: BLE001 - attach the drop index
        raise DropError(drop, e) from e


@dataclass
class _DropContext:
    """Deployment and link budget for one drop, shared by every load and scheme."""

    dep: Deployment
    link: tuple | None
    streams: list


def _context(config: ExperimentConfig, drop: int) -> _DropContext:
    streams = drop_streams(config.seed, drop)
    dep = sample_deployment(config.tier_specs(), config.region.build(), np.random.default_rng(streams[0]),
                            config.users_per_cell)
    link = None
    if dep.n_nodes:
        # same shadowing stream the simulator would derive from the MAC seed
        shadow_rng = np.random.default_rng(np.random.default_rng(streams[3]).integers(2**63))
        link = link_budget(dep, config.pathloss.build(), shadow_rng)
    return _DropContext(dep, link, streams)


def _run_drop(config, drop, load, scheme, abs_rate, trace, ctx: _DropContext | None = None) -> DropResult:
    ctx = ctx if ctx is not None else _context(config, drop)
    dep = ctx.dep
    _, s_chan, s_scheme, s_mac = ctx.streams
    names = [t.name for t in config.tiers]
    cells = {name: int(np.sum(dep.tier == k)) for k, name in enumerate(names)}
    if dep.n_nodes == 0:
        nan = {name: math.nan for name in names}
        return DropResult(drop, load, scheme, dict(nan), dict(nan), cells, dep.digest())
    loads = config.tier_loads(load)
    plan = build_plan(config, dep, scheme, loads, np.random.default_rng(s_chan), np.random.default_rng(s_scheme))
    sim = DropSimulator(dep, config.channel_models(), config.mac.build(), loads, abs_rate, plan,
                        np.random.default_rng(s_mac), config.mac.frame_length, trace,
                        abs_sync=config.abs_mode == "synchronous", link=ctx.link,
                        user_mask=plan.user_mask)
    for _ in range(config.frames_per_drop):
        sim.simulate_frame()
    cap, thr = sim.capacity(), sim.throughput()
    capacity, delivered = {}, {}
    for k, name in enumerate(names):
        ids = dep.tier == k
        c = cap[ids]
        c = c[np.isfinite(c)]
        capacity[name] = float(c.mean()) if len(c) else math.nan
        delivered[name] = float(thr[ids].mean()) if ids.any() else math.nan
    return DropResult(drop, load, scheme, capacity, delivered, cells, dep.digest(), cap, thr)


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    scheme: str
    load: float
    tier: str
    mean_tput_mbps: float
    ci95_lo: float
    ci95_hi: float
    drops: int


@dataclass
class ThroughputCurve:
    """Aggregated points plus the per-drop samples behind them.

    ``samples`` maps (scheme, load, tier) to the per-drop values in Mbps (NaN
    where a drop had no cell of that tier); it is not serialized.
    """

    points: list[CurvePoint]
    meta: dict[str, str] = field(default_factory=dict)
    samples: dict = field(default_factory=dict, compare=False, repr=False)
    digests: list[str] = field(default_factory=list, compare=False, repr=False)

    def point(self, scheme: str, load: float, tier: str) -> CurvePoint:
        for p in self.points:
            if p.scheme == scheme and p.load == load and p.tier == tier:
                return p
        raise KeyError((scheme, load, tier))

    def series(self, scheme: str, tier: str) -> list[CurvePoint]:
        return sorted((p for p in self.points if p.scheme == scheme and p.tier == tier), key=lambda p: p.load)

    def sample(self, scheme: str, load: float, tier: str) -> np.ndarray:
        return self.samples[(scheme, load, tier)]


def summarize(values) -> tuple[float, float, float, int]:
    """Mean and normal-approximation CI95 of the finite values."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    n = len(v)
    if n == 0:
        return 0.0, 0.0, 0.0, 0
    mean = float(v.mean())
    if n == 1:
        return mean, mean, mean, 1
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(n)
    return mean, mean - half, mean + half, n


def _drop_task(args) -> tuple[str, list[tuple[str, float, dict[str, float]]]]:
    config, drop, schemes, abs_rate = args
    out = []
    try:
        ctx = _context(config, drop)
    except Exception as e:  # noqa: BLE001 - attach the drop index
        raise DropError(drop, e) from e
    digest = ctx.dep.digest()
    for scheme in schemes:
        for load in config.load_grid:
            r = run_drop(config, drop, load, scheme, abs_rate, ctx=ctx)
            values = r.capacity if config.metric == CAPACITY else r.delivered
            out.append((scheme, load, values))
    return digest, out


def _map_drops(config: ExperimentConfig, schemes, abs_rate, workers: int):
    tasks = [(config, d, tuple(schemes), abs_rate) for d in range(config.drops)]
    if workers <= 1 or config.drops == 1:
        return [_drop_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves drop order, so the fold below is worker-count invariant
        return list(pool.map(_drop_task, tasks, chunksize=max(1, config.drops // (4 * workers))))


def provenance(config: ExperimentConfig) -> dict[str, str]:
    pl, rm, mac = config.pathloss, config.rate_map, config.mac
    return {
        "version": __version__,
        "config_hash": config.digest(),
        "seed": str(config.seed),
        "drops": str(config.drops),
        "frames_per_drop": str(config.frames_per_drop),
        "abs_rate": repr(config.abs_rate),
        "abs_mode": config.abs_mode,
        "metric": config.metric,
        "pathloss": (f"intercept_db={pl.intercept_db!r} dist_slope_db={pl.dist_slope_db!r} "
                     f"freq_slope_db={pl.freq_slope_db!r} alpha={pl.alpha!r} min_distance_m={pl.min_distance_m!r} "
                     f"shadowing_db={pl.shadowing_db!r}"),
        "rate_map": (f"bandwidth_mhz={rm.bandwidth_mhz!r} attenuation={rm.attenuation!r} "
                     f"sir_floor_db={rm.sir_floor_db!r}"),
        "mac": (f"cs_threshold_dbm={mac.cs_threshold_dbm!r} max_backoff={mac.max_backoff} txop={mac.txop} "
                f"frame_length={mac.frame_length} sense_in_burst={mac.sense_in_burst}"),
    }


def compare_schemes(
    config: ExperimentConfig,
    schemes: Sequence[str],
    workers: int = 1,
    abs_rate: float | None = None,
) -> ThroughputCurve:
    """Sweep the load grid for each scheme on shared drops (common random numbers)."""
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError("scheme", f"unknown scheme {s!r}")
        if s in (HFR3, SFR) and config.subbands % 3:
            raise ConfigError("subbands", f"must be a multiple of 3 for scheme {s!r}")
    if config.drops < 30:
        warnings.warn(f"only {config.drops} drops; CI95 from the normal approximation is unreliable below 30",
                      RuntimeWarning, stacklevel=2)
    abs_rate = config.abs_rate if abs_rate is None else abs_rate
    results = _map_drops(config, schemes, abs_rate, workers)
    names = [t.name for t in config.tiers]
    samples = {(s, l, t): np.full(config.drops, np.nan) for s in schemes for l in config.load_grid for t in names}
    digests = []
    for d, (digest, rows) in enumerate(results):
        digests.append(digest)
        for scheme, load, values in rows:
            for t in names:
                samples[(scheme, load, t)][d] = values[t] / 1e6
    points = []
    for scheme in schemes:
        for load in config.load_grid:
            for t in names:
                mean, lo, hi, n = summarize(samples[(scheme, load, t)])
                points.append(CurvePoint(scheme, float(load), t, mean, lo, hi, n))
    meta = provenance(config)
    if abs_rate != config.abs_rate:
        meta["abs_rate"] = repr(abs_rate)
    return ThroughputCurve(points, meta, samples, digests)


def sweep_load(config: ExperimentConfig, workers: int = 1, abs_rate: float | None = None) -> ThroughputCurve:
    return compare_schemes(config, [config.scheme], workers, abs_rate)


# -- output ------------------------------------------------------------------


def emit_csv(curve: ThroughputCurve, path: str | Path | None = None) -> str:
    """Write the curve as header-commented CSV; returns the text."""
    if not curve.points:
        raise ValueError("nothing to emit")
    buf = io.StringIO()
    buf.write(f"# coexsim {curve.meta.get('version', __version__)}\n")
    for key, value in curve.meta.items():
        if key != "version":
            buf.write(f"# {key}: {value}\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for p in curve.points:
        buf.write(f"{p.scheme},{p.load!r},{p.tier},{p.mean_tput_mbps!r},{p.ci95_lo!r},{p.ci95_hi!r},{p.drops}\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_csv(text: str) -> ThroughputCurve:
    meta: dict[str, str] = {}
    points = []
    header_seen = False
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("# "):
            body = line[2:]
            if body.startswith("coexsim ") and "version" not in meta:
                meta["version"] = body.split(" ", 1)[1]
            elif ": " in body:
                k, v = body.split(": ", 1)
                meta[k] = v
            continue
        cols = line.split(",")
        if not header_seen:
            if tuple(cols) != CSV_COLUMNS:
                raise ValueError(f"unexpected CSV header {line!r}")
            header_seen = True
            continue
        s, load, tier, mean, lo, hi, n = cols
        points.append(CurvePoint(s, float(load), tier, float(mean), float(lo), float(hi), int(n)))
    return ThroughputCurve(points, meta)


def curve_to_json(curve: ThroughputCurve) -> str:
    return json.dumps({"meta": curve.meta, "points": [asdict(p) for p in curve.points]}, indent=2, sort_keys=True)


def emit_json(curve: ThroughputCurve, path: str | Path) -> None:
    if not curve.points:
        raise ValueError("nothing to emit")
    Path(path).write_text(curve_to_json(curve) + "\n")


# -- inference validation ----------------------------------------------------


@dataclass(frozen=True)
class DensityCheck:
    alpha: float
    h: float
    true_lambda: float
    mean_lambda_hat: float
    rel_error: float
    trials: int


@dataclass(frozen=True)
class SirCheck:
    alpha: float
    h: float
    true_lambda: float
    d: float
    sir_hat_db: float
    sir_mc_db: float
    error_db: float


@dataclass
class InferenceReport:
    density: list[DensityCheck]
    sir: list[SirCheck]
    tolerance: float
    sir_tolerance_db: float

    @property
    def passed(self) -> bool:
        return all(c.rel_error < self.tolerance for c in self.density) and all(
            abs(c.error_db) <= self.sir_tolerance_db for c in self.sir)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# coexsim {__version__}\n")
        buf.write(f"# tolerance: {self.tolerance!r}\n")
        buf.write(",".join(INFER_COLUMNS) + "\n")
        for c in self.density:
            buf.write(f"{c.alpha!r},{c.h!r},{c.true_lambda!r},{c.mean_lambda_hat!r},{c.rel_error!r},{c.trials}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "passed": self.passed,
            "tolerance": self.tolerance,
            "sir_tolerance_db": self.sir_tolerance_db,
            "density": [asdict(c) for c in self.density],
            "sir": [asdict(c) for c in self.sir],
        }, indent=2, sort_keys=True)


def _oracle_draws(config: ExperimentConfig, lam, alpha, inner, draws, rng):
    """Aggregate power at a sensor from a unit-power PPP beyond ``inner``."""
    outer = default_outer_radius(inner, alpha)
    if config.inference.oracle == "power_law":
        return ppp_power_draws(lam, 1.0, inner, alpha, draws, rng, outer)
    model = _alpha_model(config, alpha)
    return ppp_power_draws(lam, 1.0, inner, alpha, draws, rng, outer,
                           power_at=lambda r: gain(model, r, 2.4e9))


def _alpha_model(config: ExperimentConfig, alpha: float) -> PathlossModel:
    pl = config.pathloss
    return PathlossModel(pl.intercept_db, 10 * alpha, pl.freq_slope_db, alpha, pl.min_distance_m, 0.0)


def validate_inference(
    config: ExperimentConfig,
    calibration: dict[tuple[float, float], float] | None = None,
    rng: np.random.Generator | None = None,
    check_sir: bool = True,
) -> InferenceReport:
    """Estimator consistency against brute-force PPP power sums.

    For each (alpha, h, lambda) the density estimate is averaged over
    ``draws`` independent sensing draws. The SIR check compares the inferred
    SIR at d in {h/2, h, 2h}, built from the mean sensed power at h, against
    S over the Monte Carlo mean interference from the PPP beyond d.
    """
    inf = config.inference
    rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence([config.seed, 0x1F]))
    calibration = calibration or {}
    dens, sirs = [], []
    signal = 1.0
    for alpha in inf.alphas:
        for h in inf.offsets_m:
            c = calibration.get((alpha, h), inf.calibration)
            for lam in inf.densities_per_m2:
                p = _oracle_draws(config, lam, alpha, h, inf.draws, rng)
                lam_hat = np.array([estimate_density(SensorReading(0, float(x), h), 1.0, alpha, c, inf.form).lambda_hat
                                    for x in p])
                mean_hat = float(lam_hat.mean())
                dens.append(DensityCheck(alpha, h, lam, mean_hat, abs(mean_hat - lam) / lam, inf.draws))
                if not check_sir:
                    continue
                reading = SensorReading(0, float(p.mean()), h)
                for d in (h / 2, h, 2 * h):
                    i_d = p if d == h else _oracle_draws(config, lam, alpha, d, inf.draws, rng)
                    est = estimate_sir(reading, signal, d, alpha)
                    truth = signal / float(i_d.mean())
                    e_db, t_db = 10 * math.log10(est), 10 * math.log10(truth)
                    sirs.append(SirCheck(alpha, h, lam, d, e_db, t_db, e_db - t_db))
    return InferenceReport(dens, sirs, inf.tolerance, inf.sir_tolerance_db)


def calibrate(config: ExperimentConfig, rng: np.random.Generator | None = None):
    """Fit one constant per (alpha, h) and re-validate with it on fresh draws.

    Returns (table, report); the fit pools the configured densities.
    """
    inf = config.inference
    rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence([config.seed, 0xCA1]))
    table = {}
    for alpha in inf.alphas:
        for h in inf.offsets_m:
            consts = []
            for lam in inf.densities_per_m2:
                model = _alpha_model(config, alpha) if inf.oracle == "pathloss" else None
                consts.append(fit_calibration(alpha, h, lam, 1.0, inf.draws, rng, model, 2.4e9, inf.form))
            table[(alpha, h)] = float(np.mean(consts)) if inf.form == SQUARED else float(consts[0])
    report = validate_inference(config, table, rng, check_sir=False)
    return table, report


# -- tier activity scenario --------------------------------------------------

FIG4_TIERS = (
    TierSpec("macro", 3e-6, 40.0, 2.1e9, 84e6, LTE_SCHEDULED),
    TierSpec("femto", 2e-4, 0.5, 2.1e9, 84e6, LTE_SCHEDULED),
    TierSpec("wifi", 3e-4, 1.0, 2.4e9, 65e6, WIFI_CONTENTION),
)
FIG4_SIGNATURES = ((1.0, 0.2, 0.0), (0.0, 1.0, 0.3), (0.3, 0.0, 1.0))
FIG4_ACTIVITIES = (0.50, 1.00, 0.25)


def tier_activity_roundtrip(
    activities=FIG4_ACTIVITIES,
    tiers: Sequence[TierSpec] = FIG4_TIERS,
    signatures=FIG4_SIGNATURES,
    h: float = 20.0,
    alpha: float = 3.67,
    draws: int = 100_000,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Forward-model per-band sensed power and decompose it back into activities.

    Each draw scatters every tier as a PPP beyond the sensor offset; a node is
    on band b with probability ``signatures[b][k]`` and active with
    probability ``activities[k]``, so band b carries a thinned PPP of density
    signature * activity * density. Readings are the per-band mean over draws.
    """
    rng = rng if rng is not None else np.random.default_rng(4)
    sig = np.asarray(signatures, dtype=float)
    act = np.asarray(activities, dtype=float)
    readings = []
    for b in range(len(sig)):
        total = np.zeros(draws)
        for k, t in enumerate(tiers):
            lam = sig[b, k] * act[k] * t.density
            if lam > 0:
                total += ppp_power_draws(lam, t.tx_power, h, alpha, draws, rng)
        readings.append(SensorReading(b, float(total.mean()), h))
    return estimate_tier_activity(readings, tiers, sig, alpha)


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)
