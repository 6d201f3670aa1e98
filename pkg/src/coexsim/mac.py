"""Subframe-granular medium access for scheduled LTE cells and contending Wi-Fi APs.

The time quantum is one 1 ms subframe for both systems. In each subframe:

1. LTE cells draw their subband demand (each subband wanted with probability
   equal to the load) and transmit unless their ABS mask blanks the subframe.
   LTE does not listen before talking.
2. Wi-Fi APs that transmitted in the previous subframe and are still within
   their TXOP keep the channel (optionally only if they still sense it idle);
   the rest contend, sensing LTE plus the holders that kept
   the channel. An idle contender decrements its backoff counter and starts
   a burst when it reaches zero, redrawing the counter for its next access.
3. SIR and rate are evaluated at every served user.

LTE capacity is measured with a probe: for each subframe the rate the cell
would obtain on its preferred subbands, counting as interferers the nodes
actually active but dropping Wi-Fi APs that would have deferred had the cell
been on air. When the cell does transmit the probe equals the realised rate.
Wi-Fi capacity is delivered bits per backlogged subframe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .channel import INTERFERENCE_FREE, PathlossModel, RateMap, db, gain, rate, undb
from .geometry import LTE_SCHEDULED, WIFI_CONTENTION, Deployment, pairwise_distance
from .mitigation import BandPlan, full_band_plan

SUBFRAME = 1e-3

TRANSMIT = "transmit"
DEFER = "defer"
BACKOFF = "backoff"
IDLE = "idle"
BLANKED = "blanked"


class MacError(ValueError):
    pass


def dbm_to_watts(dbm: float) -> float:
    return float(undb(dbm - 30.0))


@dataclass(frozen=True)
class AbsPattern:
    rate: float
    blanked: np.ndarray

    @property
    def frame_length(self) -> int:
        return len(self.blanked)


@dataclass(frozen=True)
class TrafficLoad:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise MacError("traffic load must lie in [0, 1]")


@dataclass(frozen=True)
class ContentionParams:
    """Carrier sense and backoff settings; the slot is one subframe.

    ``txop`` is the longest run of consecutive subframes an AP may hold the
    channel after winning access. An ongoing burst is not aborted when LTE
    (which does not listen before talking) starts up underneath it, unless
    ``sense_in_burst`` is set.
    """

    cs_threshold: float = dbm_to_watts(-82.0)
    max_backoff: int = 3
    txop: int = 8
    sense_in_burst: bool = True

    def __post_init__(self):
        if self.cs_threshold <= 0:
            raise MacError("cs_threshold must be positive")
        if self.max_backoff < 1:
            raise MacError("max_backoff must be >= 1")
        if self.txop < 1:
            raise MacError("txop must be >= 1")


@dataclass
class BackoffState:
    counter: int = 0
    burst: int = 0


@dataclass(frozen=True)
class ChannelModels:
    pathloss: PathlossModel
    rate_maps: tuple[RateMap, ...]


def received_power_matrix(deployment: Deployment, model: PathlossModel, points) -> np.ndarray:
    """Mean received power at each point from every node at full power, shape (points, nodes)."""
    tiers = deployment.tiers
    if deployment.n_nodes == 0:
        return np.zeros((len(np.asarray(points).reshape(-1, 2)), 0))
    power = np.array([t.tx_power for t in tiers])[deployment.tier]
    carrier = np.array([t.carrier for t in tiers])[deployment.tier]
    d = pairwise_distance(points, deployment.positions, deployment.region)
    return gain(model, d, carrier[None, :]) * power[None, :]


def link_budget(
    deployment: Deployment, model: PathlossModel, shadow_rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Received power from each node at full power, at every user and every node site.

    The node-to-node matrix has a zero diagonal. Log-normal shadowing is
    drawn per link when the model asks for it.
    """
    tiers = deployment.tiers
    n = deployment.n_nodes
    power = np.array([t.tx_power for t in tiers])[deployment.tier] if n else np.zeros(0)
    carrier = np.array([t.carrier for t in tiers])[deployment.tier] if n else np.zeros(0)
    d_user = pairwise_distance(deployment.user_positions, deployment.positions, deployment.region)
    d_node = pairwise_distance(deployment.positions, deployment.positions, deployment.region)
    g_user = gain(model, d_user, carrier[None, :]) if d_user.size else np.zeros(d_user.shape)
    g_node = gain(model, d_node, carrier[None, :]) if d_node.size else np.zeros(d_node.shape)
    if model.shadowing_db > 0:
        shadow_rng = shadow_rng if shadow_rng is not None else np.random.default_rng()
        g_user = g_user * undb(shadow_rng.normal(0, model.shadowing_db, g_user.shape))
        g_node = g_node * undb(shadow_rng.normal(0, model.shadowing_db, g_node.shape))
    rx_user = g_user * power[None, :]
    rx_node = g_node * power[None, :]
    np.fill_diagonal(rx_node, 0.0)
    return rx_user, rx_node


def build_abs_pattern(rate_: float, frame_length: int = 10, rng: np.random.Generator | None = None) -> AbsPattern:
    if not 0.0 <= rate_ <= 1.0:
        raise MacError("ABS rate must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    return AbsPattern(rate_, rng.random(frame_length) < rate_)


def lte_active(subframe: int, load: TrafficLoad, pattern: AbsPattern, rng: np.random.Generator) -> bool:
    if pattern.blanked[subframe % pattern.frame_length]:
        return False
    return bool(rng.random() < load.value)


def wifi_contend(
    sensed_power: float,
    params: ContentionParams,
    state: BackoffState,
    rng: np.random.Generator,
    has_traffic: bool = True,
) -> tuple[str, BackoffState]:
    """One subframe of the AP state machine; returns (action, new state).

    ``state.burst`` counts subframes transmitted in the current burst. For a
    burst holder ``sensed_power`` is what it hears from LTE and the other
    holders (ignored unless ``params.sense_in_burst``); for a contender it is LTE plus the holders that carried on.
    """
    counter, burst = state.counter, state.burst
    if not has_traffic:
        return IDLE, BackoffState(counter, 0)
    if 0 < burst < params.txop:
        if not params.sense_in_burst or sensed_power < params.cs_threshold:
            return TRANSMIT, BackoffState(counter, burst + 1)
        return DEFER, BackoffState(counter, 0)
    if sensed_power >= params.cs_threshold:
        return DEFER, BackoffState(counter, 0)
    if counter > 0:
        counter -= 1
    if counter == 0:
        return TRANSMIT, BackoffState(int(rng.integers(1, params.max_backoff + 1)), 1)
    return BACKOFF, BackoffState(counter, 0)


@dataclass
class FrameRecord:
    """Per-node outcome of one frame.

    ``sir`` has one row per subframe and holds the SIR at each node's first
    user on its first preferred subband (probe SIR for LTE cells, NaN for an
    AP that did not transmit).
    """

    transmitted: np.ndarray
    sir: np.ndarray
    delivered_bits: np.ndarray
    capacity_bits: np.ndarray
    demand: np.ndarray
    backlogged: np.ndarray


class DropSimulator:
    """Carries MAC state for one deployment across consecutive frames."""

    def __init__(
        self,
        deployment: Deployment,
        models: ChannelModels,
        params: ContentionParams,
        loads,
        abs_rate: float = 0.0,
        plan: BandPlan | None = None,
        rng: np.random.Generator | None = None,
        frame_length: int = 10,
        trace: Callable[[dict], None] | None = None,
        abs_sync: bool = False,
        link: tuple[np.ndarray, np.ndarray] | None = None,
        user_mask: np.ndarray | None = None,
    ):
        self.dep = deployment
        self.models = models
        self.params = params
        self.loads = np.asarray(loads, dtype=float)
        if self.loads.shape != (len(deployment.tiers),):
            raise MacError("need one load per tier")
        if np.any((self.loads < 0) | (self.loads > 1)):
            raise MacError("loads must lie in [0, 1]")
        if not 0.0 <= abs_rate <= 1.0:
            raise MacError("ABS rate must lie in [0, 1]")
        self.abs_rate = abs_rate
        self.abs_sync = abs_sync
        self.rng = rng if rng is not None else np.random.default_rng()
        self.frame_length = frame_length
        self.trace = trace
        n = deployment.n_nodes
        self.plan = plan if plan is not None else full_band_plan(n, 1)
        if self.plan.n_cells != n:
            raise MacError("band plan does not cover every node")
        self.S = self.plan.subbands
        self.subframe = 0

        tiers = deployment.tiers
        proto = np.array([tiers[k].protocol for k in deployment.tier])
        self.lte = np.flatnonzero(proto == LTE_SCHEDULED)
        self.wifi = np.flatnonzero(proto == WIFI_CONTENTION)
        self.power = np.array([t.tx_power for t in tiers])[deployment.tier] if n else np.zeros(0)
        self.node_load = self.loads[deployment.tier] if n else np.zeros(0)

        shadow_rng = np.random.default_rng(self.rng.integers(2**63))
        if link is None:
            link = link_budget(deployment, models.pathloss, shadow_rng)
        self.rx_user, self.rx_node = link

        self.serving = deployment.serving
        self.n_users = len(self.serving)
        self.users_per_node = np.bincount(self.serving, minlength=n).astype(float)
        # user_mask[u, s]: user u is scheduled on subband s of its cell
        if user_mask is None:
            user_mask = np.ones((self.n_users, self.S), dtype=bool)
        self.user_mask = np.asarray(user_mask, dtype=bool)
        if self.user_mask.shape != (self.n_users, self.S):
            raise MacError("user mask must be (users, subbands)")
        self.mask_count = np.zeros((n, self.S))
        np.add.at(self.mask_count, self.serving, self.user_mask)
        self.is_lte_user = np.isin(self.serving, self.lte)
        self.first_user = np.full(n, -1)
        for u in range(self.n_users - 1, -1, -1):
            self.first_user[self.serving[u]] = u
        self.user_tier = deployment.tier[self.serving] if self.n_users else np.zeros(0, dtype=int)
        self.peak = np.array([m.peak_rate for m in models.rate_maps])

        self.wifi_channel = self.plan.order[self.wifi, 0] if len(self.wifi) else np.zeros(0, dtype=int)
        self.wifi_same = self.wifi_channel[:, None] == self.wifi_channel[None, :]
        self.rx_ww = self.rx_node[np.ix_(self.wifi, self.wifi)] * self.wifi_same
        self.rx_wl = self.rx_node[np.ix_(self.wifi, self.lte)]
        # power an LTE cell would put at each AP site (rows: LTE, cols: AP)
        self.rx_lw = self.rx_node[np.ix_(self.wifi, self.lte)].T

        self.counter = self.rng.integers(1, params.max_backoff + 1, size=len(self.wifi))
        self.burst = np.zeros(len(self.wifi), dtype=int)
        self.tx_prev = np.zeros(len(self.wifi), dtype=bool)

        self.totals = FrameRecord(
            transmitted=np.zeros(n),
            sir=np.zeros((0, n)),
            delivered_bits=np.zeros(n),
            capacity_bits=np.zeros(n),
            demand=np.zeros(n),
            backlogged=np.zeros(n),
        )
        self.n_subframes = 0

    def draw_patterns(self) -> np.ndarray:
        """ABS masks for one frame, shape (LTE cells, frame).

        Synchronous mode draws one mask shared by every cell; otherwise each
        cell draws its own.
        """
        if self.abs_sync:
            mask = self.rng.random(self.frame_length) < self.abs_rate
            return np.tile(mask, (len(self.lte), 1))
        return self.rng.random((len(self.lte), self.frame_length)) < self.abs_rate

    def simulate_frame(self, patterns: np.ndarray | None = None) -> FrameRecord:
        if patterns is None:
            patterns = self.draw_patterns()
        patterns = np.asarray(patterns, dtype=bool).reshape(len(self.lte), self.frame_length)
        n = self.dep.n_nodes
        rec = FrameRecord(
            transmitted=np.zeros(n),
            sir=np.full((self.frame_length, n), np.nan),
            delivered_bits=np.zeros(n),
            capacity_bits=np.zeros(n),
            demand=np.zeros(n),
            backlogged=np.zeros(n),
        )
        for t in range(self.frame_length):
            self._subframe(patterns[:, t], rec, t)
        for name in ("transmitted", "delivered_bits", "capacity_bits", "demand", "backlogged"):
            getattr(self.totals, name).__iadd__(getattr(rec, name))
        self.n_subframes += self.frame_length
        return rec

    def _subframe(self, blanked: np.ndarray, rec: FrameRecord, t: int) -> None:
        S, plan, p = self.S, self.plan, self.params
        rng = self.rng
        lte, wifi = self.lte, self.wifi
        L, A = len(lte), len(wifi)
        thr = p.cs_threshold

        # LTE: demand, preference order and activity
        u = rng.random((L, S))
        lte_load = self.node_load[lte]
        demand = (u < lte_load[:, None]).sum(axis=1)
        probe_demand = np.where(lte_load > 0, demand, 1)
        allowed = plan.allowed[lte]
        order = plan.order[lte].copy()
        shuffle = plan.shuffle[lte]
        if shuffle.any():
            keys = rng.random((int(shuffle.sum()), S)) + np.where(allowed[shuffle], 0.0, 2.0)
            order[shuffle] = np.argsort(keys, axis=1)
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(S)[None, :].repeat(L, axis=0), axis=1)
        n_allowed = allowed.sum(axis=1)
        on_air = ~blanked
        tx_l = (rank < np.minimum(demand, n_allowed)[:, None]) & on_air[:, None]
        probe_l = (rank < np.minimum(probe_demand, n_allowed)[:, None]) & on_air[:, None]
        scale_l = plan.power[lte]
        lte_pw = self.power[lte][:, None] * scale_l * tx_l  # (L, S) radiated power

        # Wi-Fi contention
        ch = self.wifi_channel
        backlog = rng.random(A) < self.node_load[wifi]
        s_lte = (self.rx_wl * (scale_l * tx_l)[:, ch].T).sum(axis=1) if L else np.zeros(A)
        holder = self.tx_prev & (self.burst < p.txop) & backlog
        hid = np.flatnonzero(holder)
        sensed_h = s_lte + self.rx_ww[:, hid].sum(axis=1)
        keep = holder & (sensed_h < thr) if p.sense_in_burst else holder
        kid = np.flatnonzero(keep)
        sensed_c = s_lte + self.rx_ww[:, kid].sum(axis=1)
        contender = backlog & ~holder
        idle_c = contender & (sensed_c < thr)
        counter = self.counter.copy()
        counter[idle_c] = np.maximum(counter[idle_c] - 1, 0)
        start = idle_c & (counter == 0)
        counter[start] = rng.integers(1, p.max_backoff + 1, size=int(start.sum()))
        tx_w = keep | start
        burst = np.where(keep, self.burst + 1, np.where(start, 1, 0))
        sensed = np.where(holder, sensed_h, sensed_c)
        if self.trace is not None:
            action_w = np.full(A, IDLE, dtype=object)
            action_w[contender & ~idle_c] = DEFER
            action_w[holder & ~keep] = DEFER
            action_w[idle_c & ~start] = BACKOFF
            action_w[tx_w] = TRANSMIT
        self.counter, self.burst, self.tx_prev = counter, burst, tx_w

        # radiated power per node and subband
        n = self.dep.n_nodes
        radiated = np.zeros((n, S))
        radiated[lte] = lte_pw
        radiated[wifi[tx_w], ch[tx_w]] = self.power[wifi[tx_w]]
        active = np.flatnonzero(radiated.any(axis=1))
        total_i = self.rx_user[:, active] @ (radiated[active] / self.power[active, None]) if len(active) else np.zeros((self.n_users, S))

        serv = self.serving
        own_radiated = radiated[serv] / self.power[serv, None]
        own_rx = self.rx_user[np.arange(self.n_users), serv]
        interference = total_i - own_rx[:, None] * own_radiated
        np.maximum(interference, 0.0, out=interference)
        signal = own_rx[:, None] * plan.power[serv]

        if L and A and tx_w.any():
            interference = self._remove_deferring(interference, self.is_lte_user, tx_w, sensed, radiated)

        with np.errstate(divide="ignore", invalid="ignore"):
            sir = np.where(interference > 0, signal / np.where(interference > 0, interference, 1.0), INTERFERENCE_FREE)
        rates = np.zeros_like(sir)
        for k, rm in enumerate(self.models.rate_maps):
            m = self.user_tier == k
            if m.any():
                rates[m] = rate(sir[m], rm)

        cell_rate = np.zeros((n, S))
        np.add.at(cell_rate, serv, rates * self.user_mask)
        cell_rate /= np.maximum(self.mask_count, 1)

        # LTE bookkeeping
        if L:
            lr = cell_rate[lte]
            rec.capacity_bits[lte] += (lr * probe_l).sum(axis=1) * SUBFRAME
            rec.demand[lte] += probe_demand
            rec.backlogged[lte] += demand > 0
            rec.delivered_bits[lte] += (lr * tx_l).sum(axis=1) / S * SUBFRAME
            rec.transmitted[lte] += tx_l.any(axis=1)
            first_sb = order[:, 0]
            fu = self.first_user[lte]
            ok = fu >= 0
            rec.sir[t, lte[ok]] = sir[fu[ok], first_sb[ok]]
        if A:
            wr = cell_rate[wifi, ch] * tx_w
            rec.delivered_bits[wifi] += wr * SUBFRAME
            rec.capacity_bits[wifi] += wr * SUBFRAME
            rec.backlogged[wifi] += backlog
            rec.demand[wifi] += backlog
            rec.transmitted[wifi] += tx_w
            fu = self.first_user[wifi]
            ok = (fu >= 0) & tx_w
            rec.sir[t, wifi[ok]] = sir[fu[ok], ch[ok]]

        if self.trace is not None:
            sub = self.subframe
            for i, node in enumerate(lte):
                action = BLANKED if blanked[i] else (TRANSMIT if tx_l[i].any() else IDLE)
                self.trace(self._trace_row(sub, node, action, rec.sir[t, node], (cell_rate[node] * tx_l[i]).sum() / S * SUBFRAME))
            for i, node in enumerate(wifi):
                bits = cell_rate[node, ch[i]] * SUBFRAME if tx_w[i] else 0.0
                self.trace(self._trace_row(sub, node, action_w[i], rec.sir[t, node], bits))
        self.subframe += 1

    def _remove_deferring(self, interference, is_lte_user, tx_w, sensed, radiated):
        """Probe correction for LTE users on subbands their cell left idle."""
        lte_users = np.flatnonzero(is_lte_user)
        serv = self.serving[lte_users]
        lte_pos = np.searchsorted(self.lte, serv)
        ch = self.wifi_channel
        thr = self.params.cs_threshold
        for s in range(self.S):
            aps = np.flatnonzero(tx_w & (ch == s))
            if not len(aps):
                continue
            idle_cell = radiated[serv, s] == 0
            if not idle_cell.any():
                continue
            users = lte_users[idle_cell]
            cells = lte_pos[idle_cell]
            scale = self.plan.power[serv[idle_cell], s]
            extra = self.rx_lw[np.ix_(cells, aps)] * scale[:, None]
            would_defer = sensed[aps][None, :] + extra >= thr
            removed = (would_defer * self.rx_user[np.ix_(users, self.wifi[aps])]).sum(axis=1)
            interference[users, s] = np.maximum(interference[users, s] - removed, 0.0)
        return interference

    @staticmethod
    def _trace_row(sub, node, action, sir_value, bits):
        sir_db = None if not np.isfinite(sir_value) and np.isnan(sir_value) else (float("inf") if np.isinf(sir_value) else float(db(sir_value)))
        return {"subframe": int(sub), "node": int(node), "action": action, "sir_db": sir_db, "bits": float(bits)}

    def capacity(self) -> np.ndarray:
        """Per-node capacity in bits/s (NaN where a node never had demand)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.totals.demand > 0, self.totals.capacity_bits / (self.totals.demand * SUBFRAME), np.nan)

    def throughput(self) -> np.ndarray:
        """Per-node delivered bits/s averaged over all simulated time."""
        if self.n_subframes == 0:
            return np.zeros(self.dep.n_nodes)
        return self.totals.delivered_bits / (self.n_subframes * SUBFRAME)


def simulate_frame(
    deployment: Deployment,
    loads,
    patterns,
    params: ContentionParams,
    models: ChannelModels,
    rng: np.random.Generator,
    plan: BandPlan | None = None,
    simulator: DropSimulator | None = None,
) -> tuple[FrameRecord, DropSimulator]:
    """Simulate one frame; pass the returned simulator back to continue a drop."""
    if simulator is None:
        simulator = DropSimulator(deployment, models, params, loads, plan=plan, rng=rng,
                                  frame_length=np.asarray(patterns).shape[-1] if patterns is not None else 10)
    return simulator.simulate_frame(patterns), simulator
