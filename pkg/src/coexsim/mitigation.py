"""Inter-cell interference mitigation schemes and the band plans they produce.

A BandPlan gives every transmitter an allowed subband set, a power scale
per subband and a preference order. A cell needing n subbands in a subframe
uses the first n allowed entries of its order; ``shuffle`` cells redraw that
order every subframe (HFR1 has no structure to prefer one subband).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Region, pairwise_distance
from .inference import SensorReading, estimate_sir

HFR1 = "hfr1"
HFR3 = "hfr3"
SFR = "sfr"
SGC = "sgc"
UNCOORDINATED = "uncoordinated"
SCHEMES = (HFR1, HFR3, SFR, SGC, UNCOORDINATED)

PRIORITY_POLICIES = ("random", "traffic", "qos")


class MitigationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BandPlan:
    subbands: int
    allowed: np.ndarray
    power: np.ndarray
    order: np.ndarray
    shuffle: np.ndarray
    colors: np.ndarray | None = None
    warnings: tuple[str, ...] = ()
    user_mask: np.ndarray | None = None

    def __post_init__(self):
        n, s = self.allowed.shape
        if s != self.subbands or self.power.shape != (n, s) or self.order.shape != (n, s):
            raise MitigationError("band plan arrays have inconsistent shapes")
        if n and not self.allowed.any(axis=1).all():
            raise MitigationError("every cell needs at least one allowed subband")
        if np.any(self.power > 1) or np.any(self.power[self.allowed] <= 0):
            raise MitigationError("power scales must lie in (0, 1]")
        if self.user_mask is not None and self.user_mask.shape[1:] != (s,):
            raise MitigationError("user mask must have one column per subband")

    @property
    def n_cells(self) -> int:
        return len(self.allowed)

    @property
    def n_allowed(self) -> np.ndarray:
        return self.allowed.sum(axis=1)

    def selected(self, cell: int, demand: int) -> list[int]:
        """First ``demand`` allowed subbands in preference order."""
        k = min(demand, int(self.n_allowed[cell]))
        return [int(s) for s in self.order[cell, :k]]

    @staticmethod
    def stack(plans: list["BandPlan"]) -> "BandPlan":
        s = plans[0].subbands
        return BandPlan(
            s,
            np.concatenate([p.allowed for p in plans]),
            np.concatenate([p.power for p in plans]),
            np.concatenate([p.order for p in plans]),
            np.concatenate([p.shuffle for p in plans]),
            None,
            tuple(w for p in plans for w in p.warnings),
        )


def _order_allowed_first(allowed: np.ndarray, rank: np.ndarray) -> np.ndarray:
    """Sort subbands allowed-first, then by ascending ``rank``."""
    key = np.where(allowed, 0, 1) * (rank.max() + 1 if rank.size else 1) + rank
    return np.argsort(key, axis=1, kind="stable")


def full_band_plan(n: int, subbands: int = 1, shuffle: bool = True) -> BandPlan:
    allowed = np.ones((n, subbands), dtype=bool)
    order = np.tile(np.arange(subbands), (n, 1))
    return BandPlan(subbands, allowed, np.ones((n, subbands)), order, np.full(n, shuffle))


def channel_plan(channels, subbands: int) -> BandPlan:
    """One subband per node, e.g. a Wi-Fi AP's operating channel."""
    channels = np.asarray(channels, dtype=int)
    n = len(channels)
    allowed = np.zeros((n, subbands), dtype=bool)
    allowed[np.arange(n), channels] = True
    rank = np.tile(np.arange(subbands), (n, 1))
    order = _order_allowed_first(allowed, rank)
    return BandPlan(subbands, allowed, allowed.astype(float), order, np.zeros(n, dtype=bool))


def interference_weights(cells: np.ndarray, region: Region, alpha: float) -> np.ndarray:
    d = pairwise_distance(cells, cells, region)
    with np.errstate(divide="ignore"):
        w = np.maximum(d, 1e-9) ** (-alpha)
    np.fill_diagonal(w, 0.0)
    return w


def nearest_neighbour_forest(weights: np.ndarray) -> list[set[int]]:
    """Adjacency of the graph linking each cell to its strongest interferer."""
    n = len(weights)
    adj: list[set[int]] = [set() for _ in range(n)]
    if n < 2:
        return adj
    for i, j in enumerate(np.argmax(weights, axis=1)):
        if i != j:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    return adj


def color_cells(weights: np.ndarray, n_colors: int = 3, max_passes: int = 50) -> np.ndarray:
    """Minimum-conflict coloring that never repeats a color across a nearest-neighbour link.

    Each cell's strongest interferer is a hard constraint. Those links form a
    forest, so coloring its components breadth-first (heaviest cell first)
    always leaves a free color; among the free colors a cell takes the one
    with the least interference weight already on it. Single-cell moves that
    keep the constraints then repeat while any cell can strictly lower its
    conflict.
    """
    n = len(weights)
    colors = np.full(n, -1)
    adj = nearest_neighbour_forest(weights)

    def cost(i):
        return np.array([weights[i, colors == c].sum() - (weights[i, i] if colors[i] == c else 0.0)
                         for c in range(n_colors)])

    def free(i):
        ok = np.ones(n_colors, dtype=bool)
        for j in adj[i]:
            if colors[j] >= 0:
                ok[colors[j]] = False
        return ok

    for root in np.argsort(-weights.sum(axis=1), kind="stable"):
        if colors[root] >= 0:
            continue
        queue = [int(root)]
        while queue:
            i = queue.pop(0)
            if colors[i] >= 0:
                continue
            colors[i] = int(np.argmin(np.where(free(i), cost(i), np.inf)))
            queue.extend(sorted(j for j in adj[i] if colors[j] < 0))
    for _ in range(max_passes):
        moved = False
        for i in range(n):
            c = np.where(free(i), cost(i), np.inf)
            best = int(np.argmin(c))
            current = cost(i)[colors[i]]
            if c[best] < current - 1e-15 * max(current, 1e-300):
                colors[i] = best
                moved = True
        if not moved:
            break
    return colors


def color_groups(subbands: int, n_colors: int = 3) -> list[list[int]]:
    if subbands % n_colors:
        raise MitigationError(f"{subbands} subbands cannot be split into {n_colors} equal groups")
    w = subbands // n_colors
    return [list(range(c * w, (c + 1) * w)) for c in range(n_colors)]


def assign_hfr(
    cells: np.ndarray,
    reuse_factor: int,
    subbands: int,
    region: Region,
    alpha: float = 3.67,
) -> BandPlan:
    cells = np.asarray(cells, dtype=float).reshape(-1, 2)
    n = len(cells)
    if reuse_factor == 1:
        return full_band_plan(n, subbands, shuffle=True)
    if reuse_factor != 3:
        raise MitigationError("reuse factor must be 1 or 3")
    groups = color_groups(subbands)
    colors = color_cells(interference_weights(cells, region, alpha)) if n else np.zeros(0, dtype=int)
    allowed = np.zeros((n, subbands), dtype=bool)
    for i, c in enumerate(colors):
        allowed[i, groups[c]] = True
    rank = np.tile(np.arange(subbands), (n, 1))
    order = _order_allowed_first(allowed, rank)
    return BandPlan(subbands, allowed, allowed.astype(float), order, np.ones(n, dtype=bool), colors)


def assign_sfr(
    cells: np.ndarray,
    serving_distance: np.ndarray,
    backoff: float,
    subbands: int,
    region: Region,
    alpha: float = 3.67,
    user_cell: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    split: str = "cell",
) -> BandPlan:
    """Soft reuse: full power on a reuse-3 edge group, ``backoff`` elsewhere.

    Users beyond the median serving distance are edge users. Without
    ``user_cell`` there is one distance per cell; otherwise distances are per
    user, ``user_cell[u]`` is the cell serving user u, the median is taken
    within each cell (``split="cell"``) or over all users (``"global"``),
    and the plan carries a
    user mask scheduling edge users on the edge group and the others on the
    backed-off subbands, alternating between the two classes in proportion
    to their users. ``rng`` randomises each cell's order within a class so
    cells do not all pile onto the lowest-indexed subband.
    """
    if not 0 < backoff <= 1:
        raise MitigationError("power backoff must lie in (0, 1]")
    cells = np.asarray(cells, dtype=float).reshape(-1, 2)
    n = len(cells)
    groups = color_groups(subbands)
    colors = color_cells(interference_weights(cells, region, alpha)) if n else np.zeros(0, dtype=int)
    edge = np.zeros((n, subbands), dtype=bool)
    for i, c in enumerate(colors):
        edge[i, groups[c]] = True
    power = np.where(edge, 1.0, backoff)
    dist = np.asarray(serving_distance, dtype=float)
    if split not in ("cell", "global"):
        raise MitigationError(f"unknown edge split {split!r}")
    is_edge_user = dist > np.median(dist) if len(dist) else np.zeros(0, dtype=bool)
    if user_cell is not None and split == "cell" and len(dist):
        uc = np.asarray(user_cell, dtype=int)
        med = np.zeros(n)
        for c in np.unique(uc):
            med[c] = np.median(dist[uc == c])
        is_edge_user = dist > med[uc]
    mask = None
    base = np.tile(np.arange(subbands), (n, 1))
    if user_cell is None:
        # edge cells: edge group first; centre cells: centre subbands first
        first = np.where(is_edge_user[:, None], ~edge, edge)
        order = np.argsort(first * subbands + base, axis=1, kind="stable")
    else:
        user_cell = np.asarray(user_cell, dtype=int)
        n_edge = np.bincount(user_cell[is_edge_user], minlength=n)[:n]
        n_centre = np.bincount(user_cell[~is_edge_user], minlength=n)[:n]
        mask = sfr_user_mask(edge, user_cell, is_edge_user)
        order = np.empty((n, subbands), dtype=int)
        for i in range(n):
            centre_sb, edge_sb = np.flatnonzero(~edge[i]), np.flatnonzero(edge[i])
            if rng is not None:
                centre_sb, edge_sb = rng.permutation(centre_sb), rng.permutation(edge_sb)
            order[i] = _interleave(centre_sb, edge_sb, n_centre[i], n_edge[i])
    allowed = np.ones((n, subbands), dtype=bool)
    return BandPlan(subbands, allowed, power, order, np.zeros(n, dtype=bool), colors, (), mask)


def _interleave(centre: np.ndarray, edge: np.ndarray, n_centre: int, n_edge: int) -> np.ndarray:
    """Alternate centre and edge subbands in proportion to each class's users.

    A class with no users goes last; ties start with the centre class.
    """
    if n_edge == 0:
        return np.concatenate([centre, edge])
    if n_centre == 0:
        return np.concatenate([edge, centre])
    # the k-th subband of a class sits at position (k + 0.5) / share
    keys = np.concatenate([(np.arange(len(centre)) + 0.5) / n_centre, (np.arange(len(edge)) + 0.5) / n_edge + 1e-9])
    return np.concatenate([centre, edge])[np.argsort(keys, kind="stable")]


def sfr_user_mask(edge: np.ndarray, user_cell: np.ndarray, is_edge_user: np.ndarray) -> np.ndarray:
    """Which users a cell serves on each subband under soft reuse.

    Edge users go on their cell's edge subbands and the rest on the other
    subbands; a subband with no user of the matching class falls back to all
    of that cell's users.
    """
    mask = np.where(is_edge_user[:, None], edge[user_cell], ~edge[user_cell])
    covered = np.zeros(edge.shape, dtype=int)
    np.add.at(covered, user_cell, mask.astype(int))
    return mask | (covered[user_cell] == 0)


@dataclass(frozen=True)
class CellPairing:
    pairs: tuple[tuple[int, int], ...]
    priorities: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def partner(self, cell: int) -> int | None:
        for a, b in self.pairs:
            if a == cell:
                return b
            if b == cell:
                return a
        return None


def assign_priorities(n: int, policy: str, rng: np.random.Generator, weights=None) -> np.ndarray:
    """Rank per cell, 0 = highest priority.

    ``traffic`` and ``qos`` rank by descending weight (offered load or QoS
    weight) and break ties randomly.
    """
    if policy not in PRIORITY_POLICIES:
        raise MitigationError(f"unknown priority policy {policy!r}")
    tiebreak = rng.random(n)
    if policy == "random" or weights is None:
        key = np.argsort(tiebreak)
    else:
        w = np.asarray(weights, dtype=float)
        key = np.lexsort((tiebreak, -w))
    ranks = np.empty(n, dtype=int)
    ranks[key] = np.arange(n)
    return ranks


def pair_cells(
    cells: np.ndarray,
    region: Region,
    rng: np.random.Generator | None = None,
    policy: str = "random",
    weights=None,
) -> CellPairing:
    """Greedy mutual-nearest-neighbour pairing.

    Mutual nearest neighbours among the unpaired cells are paired, and the
    process repeats until fewer than two cells remain unpaired.
    """
    cells = np.asarray(cells, dtype=float).reshape(-1, 2)
    n = len(cells)
    rng = rng if rng is not None else np.random.default_rng(0)
    priorities = assign_priorities(n, policy, rng, weights)
    if n < 2:
        return CellPairing((), priorities)
    d = pairwise_distance(cells, cells, region)
    np.fill_diagonal(d, np.inf)
    free = np.ones(n, dtype=bool)
    pairs = []
    while free.sum() >= 2:
        idx = np.flatnonzero(free)
        sub = d[np.ix_(idx, idx)]
        nn = np.argmin(sub, axis=1)
        for a in range(len(idx)):
            b = nn[a]
            if a < b and nn[b] == a:
                pairs.append((int(idx[a]), int(idx[b])))
                free[idx[a]] = free[idx[b]] = False
    return CellPairing(tuple(sorted(pairs)), priorities)


def _sir_state(signal, base, coupling, usage, cell):
    interf = base[cell] + coupling[cell] @ usage
    with np.errstate(divide="ignore"):
        return np.where(interf > 0, signal[cell] / np.where(interf > 0, interf, 1.0), np.inf)


def sgc_select(
    pairing: CellPairing,
    channel_state: np.ndarray | None,
    demand,
    *,
    signal: np.ndarray | None = None,
    base_interference: np.ndarray | None = None,
    coupling: np.ndarray | None = None,
) -> BandPlan:
    """One-round sequential game over pairs in priority order.

    Within a pair the higher-priority cell takes its ``demand`` best subbands;
    its partner then takes its best subbands among those not claimed by the
    leader, falling back to claimed ones only when it must. Unpaired cells
    choose greedily alone.

    ``channel_state`` is a static (cells x subbands) SIR table. Alternatively
    pass ``signal``, ``base_interference`` and ``coupling`` (received power at
    cell i's user from cell j) and the SIR seen by each cell is recomputed
    from the subbands already claimed by cells that moved before it.
    """
    dynamic = coupling is not None
    if dynamic:
        signal = np.asarray(signal, dtype=float)
        base_interference = np.asarray(base_interference, dtype=float)
        coupling = np.asarray(coupling, dtype=float)
        n, s = signal.shape
    else:
        channel_state = np.asarray(channel_state, dtype=float)
        n, s = channel_state.shape
    demand = np.broadcast_to(np.asarray(demand, dtype=int), (n,)).copy()
    notes = []
    if np.any(demand > s):
        notes.append(f"demand clamped to {s} subbands")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
        demand = np.minimum(demand, s)
    prio = np.asarray(pairing.priorities) if len(pairing.priorities) == n else np.arange(n)
    units = [tuple(sorted(p, key=lambda c: prio[c])) for p in pairing.pairs]
    paired = {c for p in pairing.pairs for c in p}
    units += [(c,) for c in range(n) if c not in paired]
    units.sort(key=lambda u: prio[u[0]])

    usage = np.zeros((n, s))
    order = np.tile(np.arange(s), (n, 1))

    def state(c):
        return _sir_state(signal, base_interference, coupling, usage, c) if dynamic else channel_state[c]

    for unit in units:
        claimed = np.zeros(s, dtype=bool)
        for c in unit:
            q = state(c)
            # claimed-by-partner last, then best SIR first
            rank = np.lexsort((np.arange(s), -q, claimed))
            order[c] = rank
            chosen = rank[: demand[c]]
            usage[c, chosen] = 1.0
            claimed[chosen] = True
    allowed = np.ones((n, s), dtype=bool)
    return BandPlan(s, allowed, np.ones((n, s)), order, np.zeros(n, dtype=bool), None, tuple(notes))


def uncoordinated_order(
    readings: list[SensorReading],
    signal_strength: float,
    d: float,
    alpha: float,
) -> np.ndarray:
    """Bands sorted by inferred SIR, best first; ties go to the lower index."""
    est = np.array([estimate_sir(r, signal_strength, d, alpha) for r in readings])
    return np.lexsort((np.arange(len(est)), -est))


def uncoordinated_select(
    readings: list[SensorReading],
    signal_strength: float,
    d: float,
    alpha: float,
) -> int:
    """Band maximizing the SIR inferred from this cell's own sensor."""
    if not readings:
        raise MitigationError("need at least one band")
    return int(readings[uncoordinated_order(readings, signal_strength, d, alpha)[0]].band)


def uncoordinated_plan(orders: np.ndarray) -> BandPlan:
    orders = np.asarray(orders, dtype=int)
    n, s = orders.shape
    return BandPlan(s, np.ones((n, s), dtype=bool), np.ones((n, s)), orders, np.zeros(n, dtype=bool))


def demand_for(load: float, subbands: int) -> int:
    return int(math.ceil(round(load * subbands, 9)))
