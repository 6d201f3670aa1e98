"""Spatial deployment: PPP node drops, Voronoi user placement, association."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import Voronoi, cKDTree

LTE_SCHEDULED = "lte_scheduled"
WIFI_CONTENTION = "wifi_contention"
PROTOCOLS = (LTE_SCHEDULED, WIFI_CONTENTION)

TORUS = "torus"
GUARD = "guard"


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    width: float
    height: float
    boundary_mode: str = TORUS

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("region width and height must be positive")
        if self.boundary_mode not in (TORUS, GUARD):
            raise GeometryError(f"unknown boundary mode {self.boundary_mode!r}")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def torus(self) -> bool:
        return self.boundary_mode == TORUS

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return (
            (pts[:, 0] >= 0)
            & (pts[:, 0] < self.width)
            & (pts[:, 1] >= 0)
            & (pts[:, 1] < self.height)
        )


@dataclass(frozen=True)
class TierSpec:
    """Deployment parameters shared by every node of one tier.

    density is in nodes per m^2, tx_power in watts, carrier in Hz and
    peak_rate in bits/s.
    """

    name: str
    density: float
    tx_power: float
    carrier: float
    peak_rate: float
    protocol: str

    def __post_init__(self):
        if self.density < 0:
            raise GeometryError(f"tier {self.name}: density must be >= 0")
        if self.tx_power <= 0:
            raise GeometryError(f"tier {self.name}: tx_power must be > 0")
        if self.peak_rate <= 0:
            raise GeometryError(f"tier {self.name}: peak_rate must be > 0")
        if self.carrier <= 0:
            raise GeometryError(f"tier {self.name}: carrier must be > 0")
        if self.protocol not in PROTOCOLS:
            raise GeometryError(f"tier {self.name}: unknown protocol {self.protocol!r}")


@dataclass(frozen=True, eq=False)
class Deployment:
    """One Monte Carlo drop: node positions and users with their serving node.

    Node ids are the row indices of ``positions``; ``serving[u]`` is the node id
    serving user ``u``.
    """

    region: Region
    tiers: tuple[TierSpec, ...]
    positions: np.ndarray
    tier: np.ndarray
    user_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    serving: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def node_ids(self) -> np.ndarray:
        return np.arange(self.n_nodes)

    def nodes_of(self, tier_index: int) -> np.ndarray:
        return np.flatnonzero(self.tier == tier_index)

    def with_users(self, user_positions, serving) -> "Deployment":
        return Deployment(
            self.region,
            self.tiers,
            self.positions,
            self.tier,
            np.asarray(user_positions, dtype=float).reshape(-1, 2),
            np.asarray(serving, dtype=int),
        )

    def to_text(self) -> str:
        """Plain-text snapshot used for debugging and hash-equality checks."""
        buf = io.StringIO()
        buf.write(f"# region {self.region.width!r} {self.region.height!r} {self.region.boundary_mode}\n")
        buf.write("# kind,id,tier,x,y,serving\n")
        for i, (x, y) in enumerate(self.positions):
            buf.write(f"node,{i},{self.tiers[self.tier[i]].name},{x!r},{y!r},\n")
        for u, (x, y) in enumerate(self.user_positions):
            s = int(self.serving[u])
            buf.write(f"user,{u},{self.tiers[self.tier[s]].name},{x!r},{y!r},{s}\n")
        return buf.getvalue()

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.to_text().encode()).hexdigest()


def wrap_delta(a: np.ndarray, b: np.ndarray, region: Region) -> np.ndarray:
    """Componentwise displacement b - a, minimum image under torus mode."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    if region.torus:
        size = np.array([region.width, region.height])
        d = d - size * np.round(d / size)
    return d


def wrap_distance(a, b, region: Region):
    """Distance between positions; broadcasts over leading axes."""
    d = wrap_delta(a, b, region)
    return np.hypot(d[..., 0], d[..., 1])


def pairwise_distance(a: np.ndarray, b: np.ndarray, region: Region) -> np.ndarray:
    """Matrix of wrap-aware distances, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    return wrap_distance(a[:, None, :], b[None, :, :], region)


def sample_ppp(tier: TierSpec, region: Region, rng: np.random.Generator) -> np.ndarray:
    n = rng.poisson(tier.density * region.area)
    pts = rng.random((n, 2)) * np.array([region.width, region.height])
    return pts


def sample_nodes(
    tiers: Sequence[TierSpec], region: Region, rng: np.random.Generator
) -> Deployment:
    pos, tier = [], []
    for k, spec in enumerate(tiers):
        p = sample_ppp(spec, region, rng)
        pos.append(p)
        tier.append(np.full(len(p), k, dtype=int))
    return Deployment(
        region,
        tuple(tiers),
        np.concatenate(pos) if pos else np.zeros((0, 2)),
        np.concatenate(tier) if tier else np.zeros(0, dtype=int),
    )


def _tree(points: np.ndarray, region: Region) -> cKDTree:
    if region.torus:
        # cKDTree rejects coordinates equal to the box size
        pts = np.mod(points, [region.width, region.height])
        return cKDTree(pts, boxsize=[region.width, region.height])
    return cKDTree(points)


def nearest_node(points: np.ndarray, nodes: np.ndarray, region: Region) -> np.ndarray:
    """Index into ``nodes`` of the nearest node for each point."""
    _, idx = _tree(nodes, region).query(np.asarray(points, dtype=float).reshape(-1, 2))
    return np.asarray(idx, dtype=int)


def _voronoi_boxes(nodes: np.ndarray, region: Region) -> np.ndarray:
    """Axis-aligned bounding box (x0, y0, x1, y1) of every node's Voronoi cell.

    Torus cells come from a 3x3 periodic tiling; guard cells from the mirror
    construction, which clips each cell to the region exactly.
    """
    n = len(nodes)
    w, h = region.width, region.height
    if n == 1:
        x, y = nodes[0]
        if region.torus:
            return np.array([[x - w / 2, y - h / 2, x + w / 2, y + h / 2]])
        return np.array([[0.0, 0.0, w, h]])
    if region.torus:
        shifts = [(i * w, j * h) for i in (0, -1, 1) for j in (0, -1, 1)]
    else:
        shifts = None
    if shifts is not None:
        pts = np.concatenate([nodes + s for s in shifts])
    else:
        mirrors = [
            nodes,
            np.column_stack([-nodes[:, 0], nodes[:, 1]]),
            np.column_stack([2 * w - nodes[:, 0], nodes[:, 1]]),
            np.column_stack([nodes[:, 0], -nodes[:, 1]]),
            np.column_stack([nodes[:, 0], 2 * h - nodes[:, 1]]),
        ]
        pts = np.concatenate(mirrors)
    # far-field anchors keep every original cell bounded
    big = 10 * max(w, h)
    anchors = np.array([[-big, -big], [-big, 2 * big], [2 * big, -big], [2 * big, 2 * big]])
    vor = Voronoi(np.concatenate([pts, anchors]), qhull_options="Qbb Qc Qz")
    boxes = np.empty((n, 4))
    for i in range(n):
        region_idx = vor.point_region[i]
        verts = [v for v in vor.regions[region_idx] if v >= 0]
        vv = vor.vertices[verts]
        boxes[i] = [vv[:, 0].min(), vv[:, 1].min(), vv[:, 0].max(), vv[:, 1].max()]
    if not region.torus:
        boxes[:, [0, 1]] = np.maximum(boxes[:, [0, 1]], 0.0)
        boxes[:, 2] = np.minimum(boxes[:, 2], w)
        boxes[:, 3] = np.minimum(boxes[:, 3], h)
    return boxes


def place_users(
    deployment: Deployment,
    users_per_cell: int,
    region: Region | None = None,
    rng: np.random.Generator | None = None,
) -> Deployment:
    """Drop ``users_per_cell`` users uniformly inside each node's Voronoi cell.

    Cells are computed among same-tier nodes only, so each user is served by
    the nearest node of its own tier. Sampling is rejection within the cell's
    bounding box, which keeps each user exactly uniform on its cell.
    """
    region = region or deployment.region
    rng = rng if rng is not None else np.random.default_rng()
    if deployment.n_nodes == 0:
        raise GeometryError("no serving nodes")
    users, serving = [], []
    for k in range(len(deployment.tiers)):
        ids = deployment.nodes_of(k)
        if len(ids) == 0:
            continue
        nodes = deployment.positions[ids]
        boxes = _voronoi_boxes(nodes, region)
        tree = _tree(nodes, region)
        lo, span = boxes[:, :2], boxes[:, 2:] - boxes[:, :2]
        for _ in range(users_per_cell):
            out = np.empty((len(ids), 2))
            pending = np.arange(len(ids))
            while len(pending):
                prop = lo[pending] + rng.random((len(pending), 2)) * span[pending]
                if region.torus:
                    prop = np.mod(prop, [region.width, region.height])
                _, near = tree.query(prop)
                ok = near == pending
                out[pending[ok]] = prop[ok]
                pending = pending[~ok]
            users.append(out)
            serving.append(ids)
    # order users by serving node so users of one cell are contiguous
    users = np.concatenate(users)
    serving = np.concatenate(serving)
    order = np.argsort(serving, kind="stable")
    return deployment.with_users(users[order], serving[order])


def sample_deployment(
    tiers: Sequence[TierSpec],
    region: Region,
    rng: np.random.Generator,
    users_per_cell: int = 1,
) -> Deployment:
    dep = sample_nodes(tiers, region, rng)
    if dep.n_nodes == 0:
        return dep
    return place_users(dep, users_per_cell, region, rng)
