import itertools
import warnings

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coexsim.channel import PathlossModel, sir
from coexsim.geometry import Region, pairwise_distance
from coexsim.inference import SensorReading, estimate_sir
from coexsim.mitigation import (
    BandPlan,
    CellPairing,
    MitigationError,
    assign_hfr,
    assign_priorities,
    assign_sfr,
    channel_plan,
    color_cells,
    demand_for,
    full_band_plan,
    interference_weights,
    pair_cells,
    sfr_user_mask,
    sgc_select,
    uncoordinated_order,
    uncoordinated_select,
)

from conftest import LTE, make_deployment

AREA = Region(1000.0, 1000.0)
ALPHA = 3.67


def ppp_cells(rng, n):
    return rng.random((n, 2)) * 1000


def nn_edges(cells):
    d = pairwise_distance(cells, cells, AREA)
    np.fill_diagonal(d, np.inf)
    return {tuple(sorted((i, int(j)))) for i, j in enumerate(np.argmin(d, axis=1))}


# -- reuse plans ----------------------------------------------------------------


def test_hfr1_is_full_band(rng):
    plan = assign_hfr(ppp_cells(rng, 7), 1, 6, AREA)
    assert plan.allowed.all() and np.all(plan.power == 1.0)


def test_hfr3_triangle_gets_three_colors():
    cells = np.array([[0.0, 0.0], [100.0, 0.0], [50.0, 86.6]])
    plan = assign_hfr(cells, 3, 3, AREA)
    assert sorted(plan.colors.tolist()) == [0, 1, 2]
    assert [plan.selected(i, 1)[0] for i in range(3)] != [0, 0, 0]


def test_hfr3_partitions_band(rng):
    plan = assign_hfr(ppp_cells(rng, 30), 3, 6, AREA)
    groups = [set(np.flatnonzero(plan.allowed[np.flatnonzero(plan.colors == c)[0]])) for c in np.unique(plan.colors)]
    for a, b in itertools.combinations(groups, 2):
        assert not a & b
    assert set().union(*groups) <= set(range(6))
    assert all(len(g) == 2 for g in groups)
    assert np.all(plan.n_allowed == 2)


def test_hfr_rejects_other_factors(rng):
    with pytest.raises(MitigationError):
        assign_hfr(ppp_cells(rng, 4), 2, 6, AREA)
    with pytest.raises(MitigationError):
        assign_hfr(ppp_cells(rng, 4), 3, 4, AREA)


def exhaustive_min_conflicts(edges, n):
    best = None
    for colors in itertools.product(range(3), repeat=n):
        c = sum(colors[a] == colors[b] for a, b in edges)
        best = c if best is None else min(best, c)
        if best == 0:
            break
    return best


def test_coloring_matches_exhaustive_on_small_scenes(rng):
    for _ in range(30):
        n = int(rng.integers(3, 11))
        cells = ppp_cells(rng, n)
        edges = nn_edges(cells)
        colors = color_cells(interference_weights(cells, AREA, ALPHA))
        greedy = sum(colors[a] == colors[b] for a, b in edges)
        assert greedy == exhaustive_min_conflicts(edges, n)


def test_coloring_separates_nearest_neighbours_on_50_cells(rng):
    for _ in range(5):
        cells = ppp_cells(rng, 50)
        colors = color_cells(interference_weights(cells, AREA, ALPHA))
        # a nearest-neighbour graph is a forest, so a conflict is never forced
        assert all(colors[a] != colors[b] for a, b in nn_edges(cells))


def test_sfr_backoff_profiles(rng):
    cells = ppp_cells(rng, 9)
    dist = rng.random(9) * 200
    plan = assign_sfr(cells, dist, 0.5, 6, AREA)
    edge = plan.power == 1.0
    assert np.all(plan.power[~edge] == 0.5)
    assert np.all(edge.sum(axis=1) == 2)
    flat = assign_sfr(cells, dist, 1.0, 6, AREA)
    assert np.all(flat.power == 1.0)
    assert np.array_equal(flat.colors, plan.colors)
    with pytest.raises(MitigationError):
        assign_sfr(cells, dist, 0.0, 6, AREA)


def test_sfr_edge_user_gains_over_hfr1():
    # two cells, each with an edge user near the midpoint
    dep = make_deployment([(400, 500, 0), (600, 500, 0)], tiers=(LTE,),
                          users=[(480, 500), (520, 500)], serving=[0, 1])
    model = PathlossModel()
    cells = dep.positions
    plan = assign_sfr(cells, np.array([80.0, 80.0]), 0.5, 3, AREA)
    for u in range(2):
        s = int(np.flatnonzero(plan.power[u] == 1.0)[0])  # this cell's edge subband
        sfr_sir = sir(dep, u, [1 - u], model, power_scale=plan.power[:, s])
        hfr_sir = sir(dep, u, [1 - u], model)
        assert sfr_sir >= hfr_sir
        assert sfr_sir == pytest.approx(2 * hfr_sir)


def test_sfr_user_mask_routes_classes():
    edge = np.array([[True, False, False], [False, True, False]])
    user_cell = np.array([0, 0, 1])
    is_edge = np.array([True, False, False])
    mask = sfr_user_mask(edge, user_cell, is_edge)
    assert mask[0].tolist() == [True, False, False]
    assert mask[1].tolist() == [False, True, True]
    # cell 1 has no edge user, so its edge subband serves everyone
    assert mask[2].tolist() == [True, True, True]


def test_sfr_per_user_plan_orders_by_class(rng):
    cells = ppp_cells(rng, 6)
    user_cell = np.repeat(np.arange(6), 2)
    dist = rng.random(12) * 200 + 10
    plan = assign_sfr(cells, dist, 0.5, 6, AREA, user_cell=user_cell, rng=rng)
    assert plan.user_mask.shape == (12, 6)
    for i in range(6):
        assert sorted(plan.order[i].tolist()) == list(range(6))
        # one edge and one centre user: classes alternate, centre first
        first_two = plan.power[i, plan.order[i, :2]]
        assert sorted(first_two.tolist()) == [0.5, 1.0] and first_two[0] == 0.5


# -- pairing --------------------------------------------------------------------


def line(xs):
    return np.column_stack([xs, np.zeros(len(xs))])


def test_pairing_examples(rng):
    assert pair_cells(line([0.0, 50.0]), AREA, rng).pairs == ((0, 1),)
    assert pair_cells(line([0.0, 100.0, 400.0, 500.0]), AREA, rng).pairs == ((0, 1), (2, 3))
    assert pair_cells(line([10.0]), AREA, rng).pairs == ()
    odd = pair_cells(line([0.0, 100.0, 400.0]), AREA, rng)
    assert len(odd.pairs) == 1


def test_pairing_matches_exact_matching(rng):
    agree = total = 0
    for _ in range(100):
        cells = ppp_cells(rng, 20)
        greedy = set(pair_cells(cells, AREA, rng).pairs)
        # pairs are meant to isolate the strongest interferers, so the exact
        # matching minimises total negative coupling d**-alpha
        coupling = interference_weights(cells, AREA, ALPHA)
        g = nx.Graph()
        g.add_weighted_edges_from((i, j, -coupling[i, j]) for i in range(20) for j in range(i + 1, 20))
        exact = {tuple(sorted(e)) for e in nx.min_weight_matching(g)}
        agree += len(greedy & exact)
        total += len(exact)
    assert agree / total >= 0.8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 25))
def test_pairing_invariants(seed, n):
    rng = np.random.default_rng(seed)
    p = pair_cells(ppp_cells(rng, n), AREA, rng)
    members = [c for pair in p.pairs for c in pair]
    assert len(members) == len(set(members))
    assert n - len(members) <= 1 or n < 2
    assert sorted(p.priorities.tolist()) == list(range(n))
    for a, b in p.pairs:
        assert p.partner(a) == b and p.partner(b) == a


def test_priority_policies(rng):
    assert sorted(assign_priorities(5, "random", rng).tolist()) == list(range(5))
    ranks = assign_priorities(4, "traffic", rng, weights=[0.1, 0.9, 0.5, 0.7])
    assert ranks.tolist() == [3, 0, 2, 1]
    with pytest.raises(MitigationError):
        assign_priorities(3, "loudest", rng)


# -- sequential game ------------------------------------------------------------


def test_sgc_saturated_demand_overlaps_fully(rng):
    pairing = CellPairing(((0, 1),), np.array([0, 1]))
    plan = sgc_select(pairing, rng.random((2, 4)), 4)
    assert set(plan.selected(0, 4)) == set(plan.selected(1, 4)) == set(range(4))


def test_sgc_sufficient_resources_disjoint(rng):
    pairing = CellPairing(((0, 1),), np.array([1, 0]))
    plan = sgc_select(pairing, np.array([[5.0, 1.0], [5.0, 1.0]]), 1)
    # cell 1 leads and takes the better subband; its partner yields
    assert plan.selected(1, 1) == [0] and plan.selected(0, 1) == [1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.integers(1, 8))
def test_sgc_no_intra_pair_overlap_when_room(seed, n, subbands):
    rng = np.random.default_rng(seed)
    cells = ppp_cells(rng, n)
    pairing = pair_cells(cells, AREA, rng)
    demand = subbands // 2
    plan = sgc_select(pairing, rng.random((n, subbands)), demand)
    for a, b in pairing.pairs:
        assert not set(plan.selected(a, demand)) & set(plan.selected(b, demand))


def test_sgc_clamps_excess_demand(rng):
    pairing = CellPairing((), np.array([0, 1]))
    with pytest.warns(RuntimeWarning, match="clamped"):
        plan = sgc_select(pairing, rng.random((2, 3)), 5)
    assert plan.warnings and len(plan.selected(0, 5)) == 3


def overlap(selections, pairs):
    return np.mean([len(set(selections[a]) & set(selections[b])) for a, b in pairs])


def test_sgc_beats_random_assignment(rng):
    sgc_ov, rand_ov = [], []
    for _ in range(100):
        cells = ppp_cells(rng, 10)
        pairing = pair_cells(cells, AREA, rng)
        plan = sgc_select(pairing, rng.random((10, 6)), 2)
        sgc_ov.append(overlap([plan.selected(i, 2) for i in range(10)], pairing.pairs))
        rand_ov.append(overlap([rng.choice(6, 2, replace=False) for _ in range(10)], pairing.pairs))
    assert np.mean(sgc_ov) <= np.mean(rand_ov)


def test_sgc_dynamic_state_avoids_strong_neighbour():
    pairing = CellPairing(((0, 1),), np.array([0, 1]))
    signal = np.ones((2, 2))
    base = np.array([[0.0, 0.1], [0.0, 0.1]])
    coupling = np.array([[0.0, 1.0], [1.0, 0.0]])
    plan = sgc_select(pairing, None, 1, signal=signal, base_interference=base, coupling=coupling)
    assert plan.selected(0, 1) == [0] and plan.selected(1, 1) == [1]


# -- uncoordinated choice -------------------------------------------------------


def test_uncoordinated_single_band():
    assert uncoordinated_select([SensorReading(0, 1e-9, 10.0)], 1e-6, 50.0, ALPHA) == 0


def test_uncoordinated_prefers_quietest_band():
    readings = [SensorReading(b, p, 10.0) for b, p in enumerate([3e-9, 1e-9, 2e-9, 1e-9])]
    assert uncoordinated_select(readings, 1e-6, 50.0, ALPHA) == 1
    assert uncoordinated_order(readings, 1e-6, 50.0, ALPHA).tolist() == [1, 3, 2, 0]
    with pytest.raises(MitigationError):
        uncoordinated_select([], 1e-6, 50.0, ALPHA)


@given(st.lists(st.floats(1e-15, 1e-3), min_size=1, max_size=8), st.floats(1e-6, 1e6))
def test_uncoordinated_scale_invariant(powers, k):
    readings = [SensorReading(b, p, 10.0) for b, p in enumerate(powers)]
    scaled = [SensorReading(b, p * k, 10.0) for b, p in enumerate(powers)]
    a = uncoordinated_select(readings, 1e-6, 40.0, ALPHA)
    b = uncoordinated_select(scaled, 1e-6 * k, 40.0, ALPHA)
    ests = [estimate_sir(r, 1e-6, 40.0, ALPHA) for r in readings]
    # the argmax is preserved unless two bands are numerically tied
    if sorted(ests)[-1] > sorted(ests + [0.0])[-2] * (1 + 1e-9):
        assert a == b


def test_uncoordinated_matches_full_knowledge_oracle(rng):
    """The sensor sees one point near its cell; the oracle sees the mean SIR over the user circle."""
    model = PathlossModel(alpha=ALPHA, dist_slope_db=10 * ALPHA)
    h, d, bands, region = 10.0, 50.0, 4, Region(2000.0, 2000.0)
    bs = np.array([1000.0, 1000.0])
    angles = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    ring = bs + d * np.column_stack([np.cos(angles), np.sin(angles)])
    hits = 0
    for _ in range(1000):
        sensor = bs + h * np.array([1.0, 0.0])
        readings, truth = [], []
        for b in range(bands):
            n = rng.poisson(20 * (b + 1))
            pos = rng.random((n, 2)) * 2000
            g = lambda pts: (10 ** (-(22.7 + 10 * ALPHA * np.log10(np.maximum(
                pairwise_distance(pts, pos, region), 10.0)) + 26 * np.log10(2.1)) / 10)).sum(axis=1)
            readings.append(SensorReading(b, float(g(sensor[None, :])[0]), h))
            truth.append(np.mean(1.0 / g(ring)))
        if uncoordinated_select(readings, 1.0, d, ALPHA) == int(np.argmax(truth)):
            hits += 1
    assert hits / 1000 >= 0.70


# -- plan invariants ------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([3, 6, 9]), st.integers(1, 20))
def test_every_plan_grants_a_subband(seed, subbands, n):
    rng = np.random.default_rng(seed)
    cells = ppp_cells(rng, n)
    dist = rng.random(n) * 200
    plans = [
        full_band_plan(n, subbands),
        assign_hfr(cells, 3, subbands, AREA),
        assign_sfr(cells, dist, 0.5, subbands, AREA),
        sgc_select(pair_cells(cells, AREA, rng), rng.random((n, subbands)), demand_for(0.5, subbands)),
        channel_plan(rng.integers(subbands, size=n), subbands),
    ]
    for plan in plans:
        assert np.all(plan.n_allowed >= 1)
        assert np.all(plan.power[plan.allowed] > 0) and np.all(plan.power <= 1)
        assert all(sorted(row) == list(range(subbands)) for row in plan.order.tolist())


def test_band_plan_rejects_starved_cell():
    allowed = np.array([[True, False], [False, False]])
    with pytest.raises(MitigationError):
        BandPlan(2, allowed, np.ones((2, 2)), np.tile([0, 1], (2, 1)), np.zeros(2, dtype=bool))


def test_demand_model():
    assert [demand_for(x, 6) for x in (0.0, 0.1, 0.5, 0.75, 1.0)] == [0, 1, 3, 5, 6]
