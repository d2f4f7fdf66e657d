"""Revealed comparative advantage, product proximity, relatedness density.

Notation follows the usual product-space literature: ``M`` is the binary
advantage matrix (RCA >= 1, inclusive), ubiquity is the column sum of ``M``,
proximity is the minimum of the two conditional co-occurrence probabilities,
and density is the proximity-weighted share of a location's advantaged
neighbours around a product.

Every reduction here runs in a fixed order on numpy's own (single-threaded)
summation so results do not depend on BLAS threading.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import EmptyYear, MissingRouting, UnknownProduct, UnmappedCountry
from .model import ContinentMap, ExportPanel, Kind, leamer_class

__all__ = [
    "AdvantageCube",
    "ProximityMatrix",
    "RelatednessPanel",
    "ProductSpaceGraph",
    "rca_matrix",
    "compute_rca",
    "compute_proximity",
    "compute_density",
    "nearest_products",
    "build_product_space",
    "compute_trm",
    "compute_des",
]

Pooling = Literal["per-year", "pooled-window"]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def rca_matrix(x: np.ndarray) -> np.ndarray:
    """Balassa index for one ``(location, product)`` value matrix.

    Rows with zero total are NaN (no RCA entries). Columns with zero total
    get RCA 0: nobody exports the product, so nobody has an advantage in it.

    Margins are correctly rounded sums (``math.fsum``), so sums that are equal
    in exact arithmetic are equal in floating point and structural ties (e.g.
    a location exporting a single product that only it exports) land on
    exactly 1 instead of one ulp either side of the threshold.
    """
    x = np.asarray(x, dtype=np.float64)
    row = np.array([math.fsum(r) for r in x])
    col = np.array([math.fsum(c) for c in x.T])
    total = math.fsum(x.ravel())
    out = np.zeros_like(x)
    live_rows = row > 0
    live_cols = col > 0
    if total > 0:
        share = x[live_rows][:, live_cols] / row[live_rows, None]
        out[np.ix_(live_rows, live_cols)] = share / (col[live_cols] / total)[None, :]
    out[~live_rows, :] = np.nan
    return out


@dataclass(frozen=True, eq=False)
class AdvantageCube:
    """RCA, binary advantage and ubiquity for one panel kind.

    ``rca`` and ``m`` are ``(location, product, period)``; ``ubiquity`` is
    ``(product, period)``. For a pooled cube there is one period, labelled by
    the first year of ``window``.
    """

    kind: Kind
    locations: tuple[str, ...]
    products: tuple[str, ...]
    years: tuple[int, ...]
    rca: np.ndarray
    window: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "rca", _frozen(np.asarray(self.rca, dtype=np.float64)))

    @property
    def pooled(self) -> bool:
        return self.window is not None

    @cached_property
    def m(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return _frozen((self.rca >= 1.0).astype(np.int8))

    @cached_property
    def ubiquity(self) -> np.ndarray:
        return _frozen(self.m.sum(axis=0, dtype=np.int64))

    @cached_property
    def year_index(self) -> dict[int, int]:
        return {y: n for n, y in enumerate(self.years)}

    @cached_property
    def product_index(self) -> dict[str, int]:
        return {c: n for n, c in enumerate(self.products)}

    @cached_property
    def location_index(self) -> dict[str, int]:
        return {c: n for n, c in enumerate(self.locations)}

    def write_csv(self, path: str | Path) -> None:
        """Long format: location, product, year, rca, m (entries present only)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location", "product", "year", "rca", "m"])
            for l, loc in enumerate(self.locations):
                for t, year in enumerate(self.years):
                    col = self.rca[l, :, t]
                    if np.isnan(col).all():
                        continue
                    for p in np.flatnonzero(col > 0):
                        w.writerow([loc, self.products[p], year, repr(float(col[p])), int(self.m[l, p, t])])

    @classmethod
    def read_csv(
        cls,
        path: str | Path,
        kind: Kind | str,
        locations: tuple[str, ...],
        products: tuple[str, ...],
        years: tuple[int, ...],
        window: tuple[int, int] | None = None,
    ) -> "AdvantageCube":
        """Inverse of :meth:`write_csv` given the panel's registries.

        Location-years absent from the file had no exports (NaN); absent
        entries within a present location-year are zero.
        """
        li = {c: n for n, c in enumerate(locations)}
        pi = {c: n for n, c in enumerate(products)}
        ti = {y: n for n, y in enumerate(years)}
        rca = np.full((len(locations), len(products), len(years)), np.nan)
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                l, t = li[row["location"]], ti[int(row["year"])]
                if np.isnan(rca[l, 0, t]):
                    rca[l, :, t] = 0.0
                rca[l, pi[row["product"]], t] = float(row["rca"])
        return cls(Kind(kind), tuple(locations), tuple(products), tuple(years), rca, window)

    def write_ubiquity_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["product", "year", "ubiquity"])
            for p, prod in enumerate(self.products):
                for t, year in enumerate(self.years):
                    w.writerow([prod, year, int(self.ubiquity[p, t])])


def compute_rca(
    panel: ExportPanel,
    pooling: Pooling = "per-year",
    window: tuple[int, int] | None = None,
) -> AdvantageCube:
    """RCA per year, or once over values pooled across ``window``.

    Raises
    ------
    EmptyYear
        A requested year (or the whole pooled window) has zero total value.
    """
    if pooling == "per-year":
        years = panel.years
        if window is not None:
            years = tuple(y for y in years if window[0] <= y <= window[1])
        rca = np.empty((len(panel.locations), len(panel.products), len(years)))
        for n, year in enumerate(years):
            x = panel.values[:, :, panel.year_index[year]]
            if not x.sum() > 0:
                raise EmptyYear(year)
            rca[:, :, n] = rca_matrix(x)
        return AdvantageCube(panel.kind, panel.locations, panel.products, years, rca)
    if pooling == "pooled-window":
        if window is None:
            window = (panel.years[0], panel.years[-1])
        x = panel.pooled(window)
        if not x.sum() > 0:
            raise EmptyYear(window[0])
        return AdvantageCube(
            panel.kind, panel.locations, panel.products, (window[0],), rca_matrix(x)[:, :, None], window=window
        )
    raise ValueError(f"unknown pooling {pooling!r}")


@dataclass(frozen=True, eq=False)
class ProximityMatrix:
    """Symmetric product-by-product proximity in [0, 1] with a zero diagonal."""

    products: tuple[str, ...]
    values: np.ndarray
    kind: Kind
    window: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, dtype=np.float64)))

    @cached_property
    def product_index(self) -> dict[str, int]:
        return {c: n for n, c in enumerate(self.products)}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["product", *self.products])
            for p, row in zip(self.products, self.values):
                w.writerow([p, *(repr(float(v)) for v in row)])

    @classmethod
    def read_csv(cls, path: str | Path, kind: Kind | str, window=None) -> "ProximityMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        products = tuple(rows[0][1:])
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(products, values, Kind(kind), window)


def compute_proximity(cube: AdvantageCube, window: tuple[int, int] | None = None) -> ProximityMatrix:
    """Co-occurrence over locations divided by the larger ubiquity.

    ``cube`` should be pooled; a per-year cube is accepted only if it has a
    single period. Products with zero ubiquity get zero proximity.
    """
    if cube.m.shape[2] != 1:
        raise ValueError("proximity needs a pooled (single-period) advantage cube")
    m = cube.m[:, :, 0].astype(np.int64)
    co = m.T @ m  # integer arithmetic: exact and symmetric
    ubiq = np.diag(co).copy()
    denom = np.maximum(ubiq[:, None], ubiq[None, :])
    prox = np.zeros(co.shape, dtype=np.float64)
    np.divide(co, denom, out=prox, where=denom > 0)
    np.fill_diagonal(prox, 0.0)
    return ProximityMatrix(cube.products, prox, cube.kind, window or cube.window)


@dataclass(frozen=True, eq=False)
class RelatednessPanel:
    """Density by ``(location, product, year)``; NaN marks undefined entries."""

    kind: Kind
    locations: tuple[str, ...]
    products: tuple[str, ...]
    years: tuple[int, ...]
    density: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "density", _frozen(np.asarray(self.density, dtype=np.float64)))

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.density)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location", "product", "year", "density"])
            for l, loc in enumerate(self.locations):
                for p, prod in enumerate(self.products):
                    for t, year in enumerate(self.years):
                        v = self.density[l, p, t]
                        w.writerow([loc, prod, year, "" if np.isnan(v) else repr(float(v))])


    @classmethod
    def read_csv(cls, path: str | Path, kind: Kind | str) -> "RelatednessPanel":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        locations = tuple(dict.fromkeys(r["location"] for r in rows))
        products = tuple(dict.fromkeys(r["product"] for r in rows))
        years = tuple(dict.fromkeys(int(r["year"]) for r in rows))
        values = np.array([float(r["density"]) if r["density"] else np.nan for r in rows])
        dens = values.reshape(len(locations), len(products), len(years))
        return cls(Kind(kind), locations, products, years, dens)


def density_matrix(m: np.ndarray, prox: np.ndarray) -> np.ndarray:
    """Density for one ``(location, product)`` advantage matrix.

    When every neighbour is advantaged the numerator and denominator are the
    same sum taken in a different order, so the ratio is clipped at 1.
    """
    denom = prox.sum(axis=1)
    out = np.full(m.shape, np.nan)
    live = denom > 0
    for l in range(m.shape[0]):
        cols = np.flatnonzero(m[l])
        num = prox[:, cols].sum(axis=1) if cols.size else np.zeros(prox.shape[0])
        out[l, live] = np.minimum(num[live] / denom[live], 1.0)
    return out


def compute_density(cube: AdvantageCube, prox: ProximityMatrix) -> RelatednessPanel:
    """Yearly relatedness density against a (pooled) proximity matrix.

    The diagonal of ``prox`` is zero, so the sum over neighbours excludes the
    product itself. Isolated products (zero proximity row) are NaN.
    """
    if cube.products != prox.products:
        raise ValueError("advantage cube and proximity matrix use different product universes")
    dens = np.empty(cube.m.shape)
    for t in range(cube.m.shape[2]):
        dens[:, :, t] = density_matrix(cube.m[:, :, t], prox.values)
    return RelatednessPanel(cube.kind, cube.locations, cube.products, cube.years, dens)


def nearest_products(prox: ProximityMatrix, product: str, n: int) -> list[tuple[str, float]]:
    """Top-``n`` neighbours by proximity; ties go to the lower HS code."""
    if product not in prox.product_index:
        raise UnknownProduct(product)
    if n <= 0:
        return []
    i = prox.product_index[product]
    ranked = sorted(
        ((prox.products[j], float(prox.values[i, j])) for j in range(len(prox.products)) if j != i),
        key=lambda kv: (-kv[1], kv[0]),
    )
    return ranked[:n]


@dataclass(frozen=True)
class ProductSpaceGraph:
    """Backbone of a proximity matrix: maximum spanning forest plus strong edges.

    ``nodes`` holds ``(id, size, leamer)``; ``edges`` holds
    ``(source, target, weight, in_mst)`` with ``source < target``.
    """

    nodes: tuple[tuple[str, float, int | None], ...]
    edges: tuple[tuple[str, str, float, bool], ...]
    threshold: float

    def to_json(self) -> str:
        doc = {
            "directed": False,
            "threshold": self.threshold,
            "nodes": [{"id": i, "size": s, "leamer": l} for i, s, l in self.nodes],
            "edges": [{"source": a, "target": b, "weight": w, "mst": m} for a, b, w, m in self.edges],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def to_networkx(self):
        import networkx as nx

        g = nx.Graph()
        for node, size, leamer in self.nodes:
            g.add_node(node, size=size, leamer=-1 if leamer is None else leamer)
        for a, b, w, mst in self.edges:
            g.add_edge(a, b, weight=w, mst=mst)
        return g

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def write_graphml(self, path: str | Path) -> None:
        import networkx as nx

        nx.write_graphml(self.to_networkx(), str(path))


def maximum_spanning_forest(weights: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal over positive weights; ties broken by the (i, j) edge key."""
    n = weights.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    w = weights[iu, ju]
    keep = w > 0
    iu, ju, w = iu[keep], ju[keep], w[keep]
    order = np.lexsort((ju, iu, -w))
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    out = []
    for k in order:
        a, b = find(int(iu[k])), find(int(ju[k]))
        if a != b:
            parent[max(a, b)] = min(a, b)
            out.append((int(iu[k]), int(ju[k])))
    return out


def build_product_space(
    prox: ProximityMatrix,
    panel: ExportPanel | None = None,
    edge_threshold: float = 0.55,
    leamer: Mapping[str, int | None] | None = None,
) -> ProductSpaceGraph:
    """Maximum spanning forest over positive proximities plus every edge at or
    above ``edge_threshold``.

    Node size is the export value pooled over all locations and years of
    ``panel`` (0 without a panel); node colour is the Leamer class.
    """
    if not 0.0 <= edge_threshold <= 1.0:
        raise ValueError("edge_threshold must lie in [0, 1]")
    values = prox.values
    mst = set(maximum_spanning_forest(values))
    iu, ju = np.nonzero(np.triu((values >= edge_threshold) & (values > 0), k=1))
    strong = set(zip(iu.tolist(), ju.tolist()))
    size = np.zeros(len(prox.products))
    if panel is not None:
        pooled = panel.pooled().sum(axis=0)
        for p, code in enumerate(panel.products):
            if code in prox.product_index:
                size[prox.product_index[code]] = pooled[p]
    colour = leamer or {}

    def node_colour(code: str) -> int | None:
        if code in colour:
            return colour[code]
        try:
            return leamer_class(code)
        except ValueError:
            return None

    nodes = tuple((code, float(size[n]), node_colour(code)) for n, code in enumerate(prox.products))
    edges = tuple(
        (prox.products[i], prox.products[j], float(values[i, j]), (i, j) in mst) for i, j in sorted(mst | strong)
    )
    return ProductSpaceGraph(nodes, edges, float(edge_threshold))


def compute_trm(panel: ExportPanel) -> dict[tuple[str, str, int], int]:
    """Number of distinct ports with positive routed value per region-product-year."""
    if panel.routing is None:
        raise MissingRouting("regional panel carries no port routing")
    r = panel.routing
    r = r[r["value"] > 0]
    counts = r.groupby(["location", "product", "year"], sort=True)["via"].nunique()
    return {(loc, prod, int(year)): int(n) for (loc, prod, year), n in counts.items()}


def compute_des(panel: ExportPanel, continents: ContinentMap) -> dict[tuple[str, str, int], int]:
    """Number of distinct destination continents per port-product-year."""
    if panel.routing is None:
        raise MissingRouting("port panel carries no destination routing")
    r = panel.routing
    r = r[r["value"] > 0]
    seen: dict[tuple[str, str, int], set] = {}
    for loc, prod, year, country in zip(r["location"], r["product"], r["year"], r["via"]):
        if country not in continents:
            raise UnmappedCountry(country)
        seen.setdefault((loc, prod, int(year)), set()).add(continents[country])
    return {k: len(v) for k, v in sorted(seen.items())}
