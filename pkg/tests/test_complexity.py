import json
import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_panel
from oracles import advantage_loop, density_loop, proximity_loop, rca_loop
from portspill.complexity import (
    AdvantageCube,
    ProximityMatrix,
    RelatednessPanel,
    build_product_space,
    compute_des,
    compute_density,
    compute_proximity,
    compute_rca,
    compute_trm,
    nearest_products,
)
from portspill.errors import EmptyYear, MissingRouting, UnknownProduct, UnmappedCountry
from portspill.model import Continent, ContinentMap, ExportPanel, Kind

seeds = st.integers(0, 2**32 - 1)


def panel_from(values, kind=Kind.REGION, products=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    locs = tuple(f"L{n}" for n in range(values.shape[0]))
    prods = products or tuple(f"{1000 + n:04d}" for n in range(values.shape[1]))
    years = tuple(range(2010, 2010 + values.shape[2]))
    return ExportPanel(kind, locs, prods, years, values)


def cube_from_m(m):
    m = np.asarray(m, dtype=float)
    return AdvantageCube(
        Kind.REGION,
        tuple(f"L{n}" for n in range(m.shape[0])),
        tuple(f"{1000 + n:04d}" for n in range(m.shape[1])),
        (2010,),
        m[:, :, None],
        window=(2010, 2010),
    )


def prox_from(values):
    values = np.asarray(values, dtype=float)
    return ProximityMatrix(tuple(f"{1000 + n:04d}" for n in range(len(values))), values, Kind.REGION)


class TestRca:
    def test_uniform_panel(self):
        cube = compute_rca(panel_from(np.full((3, 4), 5.0)))
        assert np.all(cube.rca == 1.0)

    def test_two_by_two(self):
        cube = compute_rca(panel_from([[10, 0], [10, 10]]))
        np.testing.assert_allclose(cube.rca[:, :, 0], [[1.5, 0.0], [0.75, 1.5]], rtol=0, atol=1e-15)
        assert cube.m[:, :, 0].tolist() == [[1, 0], [0, 1]]
        assert cube.ubiquity[:, 0].tolist() == [1, 1]

    def test_single_cell(self):
        assert compute_rca(panel_from([[7.0]])).rca[0, 0, 0] == 1.0

    def test_threshold_inclusive(self):
        # both locations have RCA exactly 1 in every product
        cube = compute_rca(panel_from([[1, 3], [2, 6]]))
        assert np.all(cube.rca[:, :, 0] == 1.0)
        assert np.all(cube.m == 1)

    def test_zero_total_location_has_no_entries(self):
        cube = compute_rca(panel_from([[0, 0], [1, 2]]))
        assert np.all(np.isnan(cube.rca[0]))
        assert np.all(cube.m[0] == 0)

    def test_empty_year(self):
        with pytest.raises(EmptyYear):
            compute_rca(panel_from(np.zeros((2, 2, 1))))

    def test_pooled_window(self):
        panel = panel_from(np.stack([[[1, 0], [0, 1]], [[0, 1], [1, 0]]], axis=2).astype(float))
        pooled = compute_rca(panel, "pooled-window")
        assert pooled.window == (2010, 2011)
        assert pooled.rca.shape == (2, 2, 1)
        np.testing.assert_array_equal(pooled.rca[:, :, 0], np.ones((2, 2)))

    def test_csv_round_trip(self, tmp_path):
        panel = random_panel(np.random.default_rng(3))
        cube = compute_rca(panel)
        cube.write_csv(tmp_path / "rca.csv")
        back = AdvantageCube.read_csv(tmp_path / "rca.csv", Kind.REGION, cube.locations, cube.products, cube.years)
        np.testing.assert_array_equal(np.isnan(back.rca), np.isnan(cube.rca))
        assert np.array_equal(np.nan_to_num(back.rca), np.nan_to_num(cube.rca))


class TestProximity:
    def test_identical_sets(self):
        prox = compute_proximity(cube_from_m([[1, 1], [1, 1], [0, 0]]))
        assert prox.values[0, 1] == 1.0

    def test_disjoint_sets(self):
        prox = compute_proximity(cube_from_m([[1, 0], [0, 1]]))
        assert prox.values[0, 1] == 0.0

    def test_one_third(self):
        # i in {A, B}, j in {B, C, D}
        prox = compute_proximity(cube_from_m([[1, 0], [1, 1], [0, 1], [0, 1]]))
        assert prox.values[0, 1] == 1 / 3
        assert prox.values[1, 0] == 1 / 3

    def test_zero_ubiquity_and_diagonal(self):
        prox = compute_proximity(cube_from_m([[1, 0, 1], [1, 0, 0]]))
        assert np.all(prox.values[:, 1] == 0) and np.all(prox.values[1] == 0)
        assert np.all(np.diag(prox.values) == 0)

    def test_needs_pooled_cube(self):
        panel = panel_from(np.ones((2, 2, 3)))
        with pytest.raises(ValueError):
            compute_proximity(compute_rca(panel))

    def test_csv_round_trip(self, tmp_path):
        prox = compute_proximity(compute_rca(random_panel(np.random.default_rng(4)), "pooled-window"))
        prox.write_csv(tmp_path / "phi.csv")
        back = ProximityMatrix.read_csv(tmp_path / "phi.csv", Kind.REGION)
        assert back.products == prox.products
        assert np.array_equal(back.values, prox.values)


class TestDensity:
    def test_all_ones(self):
        dens = compute_density(cube_from_m([[1, 1, 1]]), prox_from([[0, 0.5, 0.2], [0.5, 0, 0.1], [0.2, 0.1, 0]]))
        assert np.all(dens.density == 1.0)

    def test_all_zeros(self):
        dens = compute_density(cube_from_m([[0, 0, 0]]), prox_from([[0, 0.5, 0.2], [0.5, 0, 0.1], [0.2, 0.1, 0]]))
        assert np.all(dens.density == 0.0)

    def test_two_neighbours(self):
        dens = compute_density(cube_from_m([[0, 1, 0]]), prox_from([[0, 0.6, 0.2], [0.6, 0, 0], [0.2, 0, 0]]))
        assert dens.density[0, 0, 0] == pytest.approx(0.75, abs=1e-15)

    def test_isolated_product_undefined(self):
        dens = compute_density(cube_from_m([[1, 1, 0]]), prox_from([[0, 0.5, 0], [0.5, 0, 0], [0, 0, 0]]))
        assert np.isnan(dens.density[0, 2, 0])
        assert not np.isnan(dens.density[0, 0, 0])

    def test_csv_round_trip(self, tmp_path):
        dens = compute_density(cube_from_m([[1, 1, 0]]), prox_from([[0, 0.5, 0], [0.5, 0, 0], [0, 0, 0]]))
        dens.write_csv(tmp_path / "omega.csv")
        back = RelatednessPanel.read_csv(tmp_path / "omega.csv", Kind.REGION)
        assert np.array_equal(np.isnan(back.density), np.isnan(dens.density))
        assert np.array_equal(np.nan_to_num(back.density), np.nan_to_num(dens.density))


def _check_against_oracle(panel):
    cube = compute_rca(panel)
    pooled = compute_rca(panel, "pooled-window")
    prox = compute_proximity(pooled)
    dens = compute_density(cube, prox)
    pooled_x = panel.values.sum(axis=2)
    ref_m_pooled = advantage_loop(rca_loop(pooled_x.tolist()))
    ref_prox = np.array(proximity_loop(ref_m_pooled))
    assert np.max(np.abs(prox.values - ref_prox), initial=0.0) <= 1e-12
    for t in range(len(panel.years)):
        ref_rca = rca_loop(panel.values[:, :, t].tolist())
        got = cube.rca[:, :, t]
        for r, row in enumerate(ref_rca):
            for i, v in enumerate(row):
                if v is None:
                    assert math.isnan(got[r, i])
                else:
                    assert abs(got[r, i] - v) <= 1e-12
        ref_m = advantage_loop(ref_rca)
        assert cube.m[:, :, t].tolist() == ref_m
        ref_dens = density_loop(ref_m, ref_prox.tolist())
        for r, row in enumerate(ref_dens):
            for i, v in enumerate(row):
                if v is None:
                    assert math.isnan(dens.density[r, i, t])
                else:
                    assert abs(dens.density[r, i, t] - v) <= 1e-12


@given(seeds)
def test_oracle_equivalence(seed):
    _check_against_oracle(random_panel(np.random.default_rng(seed)))


@given(seeds)
def test_share_identity(seed):
    panel = random_panel(np.random.default_rng(seed))
    x = panel.values
    tot = x.sum(axis=1)
    for l, t in zip(*np.nonzero(tot > 0)):
        assert abs(math.fsum(x[l, :, t] / tot[l, t]) - 1.0) <= 1e-12

@given(seeds)
def test_proximity_symmetric_and_bounded(seed):
    prox = compute_proximity(compute_rca(random_panel(np.random.default_rng(seed)), "pooled-window")).values
    assert np.array_equal(prox, prox.T)
    assert np.all((prox >= 0) & (prox <= 1))
    assert np.all(np.diag(prox) == 0)

@given(seeds)
def test_density_monotone_in_advantage(seed):
    rng = np.random.default_rng(seed)
    n_loc, n_prod = int(rng.integers(1, 6)), int(rng.integers(2, 12))
    m = (rng.random((n_loc, n_prod)) < 0.4).astype(float)
    prox = compute_proximity(cube_from_m((rng.random((8, n_prod)) < 0.5).astype(float)))
    before = compute_density(cube_from_m(m), prox).density
    zeros = np.argwhere(m == 0)
    if len(zeros) == 0:
        return
    l, j = zeros[rng.integers(len(zeros))]
    m2 = m.copy()
    m2[l, j] = 1
    after = compute_density(cube_from_m(m2), prox).density
    defined = ~np.isnan(before)
    assert np.array_equal(defined, ~np.isnan(after))
    assert np.all(after[defined] >= before[defined])

@given(seeds)
def test_density_bounds(seed):
    panel = random_panel(np.random.default_rng(seed))
    dens = compute_density(compute_rca(panel), compute_proximity(compute_rca(panel, "pooled-window"))).density
    ok = dens[~np.isnan(dens)]
    assert np.all((ok >= 0) & (ok <= 1))

@given(seeds, st.sampled_from([2.0, 0.5, 1024.0, 2.0**-20, 3.0, 0.1, 1e6]))
def test_scale_invariance(seed, factor):
    panel = random_panel(np.random.default_rng(seed))
    scaled = ExportPanel(panel.kind, panel.locations, panel.products, panel.years, panel.values * factor)
    a, b = compute_rca(panel), compute_rca(scaled)
    assert np.array_equal(a.m, b.m) or _only_ties_differ(a, b)
    np.testing.assert_allclose(np.nan_to_num(a.rca), np.nan_to_num(b.rca), rtol=1e-13, atol=0)
    if factor in (2.0, 0.5, 1024.0, 2.0**-20):  # powers of two: bit-exact
        assert np.array_equal(np.nan_to_num(a.rca), np.nan_to_num(b.rca))
    pa = compute_proximity(compute_rca(panel, "pooled-window"))
    pb = compute_proximity(compute_rca(scaled, "pooled-window"))
    if np.array_equal(compute_rca(panel, "pooled-window").m, compute_rca(scaled, "pooled-window").m):
        assert np.array_equal(pa.values, pb.values)
        if np.array_equal(a.m, b.m):
            da, db = compute_density(a, pa).density, compute_density(b, pb).density
            assert np.array_equal(np.isnan(da), np.isnan(db))
            assert np.array_equal(np.nan_to_num(da), np.nan_to_num(db))


def _only_ties_differ(a, b):
    """Non-power-of-two scaling can move an RCA of exactly 1 by one ulp."""
    diff = a.m != b.m
    return bool(np.all(np.abs(np.nan_to_num(a.rca)[diff] - 1.0) <= 1e-13))


def test_oracle_thousand_panels():
    rng = np.random.default_rng(12345)
    for _ in range(1000):
        _check_against_oracle(random_panel(rng))


class TestNearest:
    def test_zero(self):
        assert nearest_products(prox_from([[0, 1], [1, 0]]), "1000", 0) == []

    def test_ties_in_code_order(self):
        prox = prox_from(np.full((4, 4), 0.5) - np.diag([0.5] * 4))
        assert [c for c, _ in nearest_products(prox, "1002", 2)] == ["1000", "1001"]

    def test_ranking(self):
        prox = prox_from([[0, 0.2, 0.9], [0.2, 0, 0.1], [0.9, 0.1, 0]])
        assert nearest_products(prox, "1000", 2) == [("1002", 0.9), ("1001", 0.2)]

    def test_unknown(self):
        with pytest.raises(UnknownProduct):
            nearest_products(prox_from([[0]]), "9999", 1)


class TestProductSpace:
    def test_three_products_mst(self):
        g = build_product_space(prox_from([[0, 0.9, 0.5], [0.9, 0, 0.1], [0.5, 0.1, 0]]), edge_threshold=1.0)
        assert sorted((a, b, w) for a, b, w, _ in g.edges) == [("1000", "1001", 0.9), ("1000", "1002", 0.5)]
        assert all(m for *_, m in g.edges)

    def test_threshold_zero_complete(self):
        g = build_product_space(prox_from([[0, 0.9, 0.5], [0.9, 0, 0.1], [0.5, 0.1, 0]]), edge_threshold=0.0)
        assert len(g.edges) == 3

    def test_single_product(self):
        g = build_product_space(prox_from([[0.0]]))
        assert len(g.nodes) == 1 and g.edges == ()

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            build_product_space(prox_from([[0.0]]), edge_threshold=1.5)

    @given(seeds)
    def test_forest_spans_components(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 15))
        w = np.round(rng.random((n, n)) * (rng.random((n, n)) < 0.3), 2)
        w = np.triu(w, 1)
        w = w + w.T
        g = build_product_space(prox_from(w), edge_threshold=1.0)
        mst = nx.Graph()
        mst.add_nodes_from(c for c, _, _ in g.nodes)
        mst.add_edges_from((a, b) for a, b, _, m in g.edges if m)
        full = nx.from_numpy_array(w)
        assert nx.number_connected_components(mst) == nx.number_connected_components(full)
        assert mst.number_of_edges() == n - nx.number_connected_components(full)
        ref = nx.maximum_spanning_tree(full).size(weight="weight")
        assert sum(wt for *_, wt, m in g.edges if m) == pytest.approx(ref, abs=1e-12)

    def test_exports(self, tmp_path):
        panel = panel_from([[1, 2, 0], [0, 1, 1]])
        g = build_product_space(prox_from([[0, 0.9, 0.5], [0.9, 0, 0.6], [0.5, 0.6, 0]]), panel, 0.55, {"1000": 3})
        g.write_json(tmp_path / "g.json")
        g.write_graphml(tmp_path / "g.graphml")
        doc = json.loads((tmp_path / "g.json").read_text())
        assert {n["id"]: n["size"] for n in doc["nodes"]} == {"1000": 1.0, "1001": 3.0, "1002": 1.0}
        assert doc["nodes"][0]["leamer"] == 3
        back = nx.read_graphml(tmp_path / "g.graphml")
        assert back.number_of_edges() == len(doc["edges"]) == 2


class TestTrmDes:
    def _region(self, routing):
        cells = {}
        for loc, prod, year, _, v in routing:
            cells[(loc, prod, year)] = cells.get((loc, prod, year), 0.0) + v
        return ExportPanel.from_cells(Kind.REGION, cells, routing=routing)

    def test_trm_counts_ports(self):
        trm = compute_trm(self._region([("RBUS", "8541", 2010, "PUS", 1.0), ("RBUS", "8541", 2010, "INC", 2.0)]))
        assert trm == {("RBUS", "8541", 2010): 2}

    def test_trm_zero_value_port_not_counted(self):
        trm = compute_trm(self._region([("RBUS", "8541", 2010, "PUS", 1.0), ("RBUS", "8541", 2010, "INC", 0.0)]))
        assert trm[("RBUS", "8541", 2010)] == 1
        assert ("RBUS", "0101", 2010) not in trm

    def test_trm_needs_routing(self):
        with pytest.raises(MissingRouting):
            compute_trm(panel_from([[1.0]]))

    def _port(self, dests):
        routing = [("PUS", "8541", 2010, d, 1.0) for d in dests]
        return ExportPanel.from_cells(Kind.PORT, [("PUS", "8541", 2010, float(len(dests)))], routing=routing)

    def test_des_counts_continents(self):
        cmap = ContinentMap({"DE": Continent.EUROPE, "FR": Continent.EUROPE, "CN": Continent.ASIA})
        assert compute_des(self._port(["DE", "FR", "CN"]), cmap) == {("PUS", "8541", 2010): 2}
        assert compute_des(self._port(["CN"]), cmap) == {("PUS", "8541", 2010): 1}

    def test_des_unmapped(self):
        with pytest.raises(UnmappedCountry):
            compute_des(self._port(["XX"]), ContinentMap({}))
