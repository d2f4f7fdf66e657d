"""Synthetic region/port panels with planted community structure and jumps.

How the generator keeps the analysis pipeline exactly reproducible:

* The first year is an *anchor* year whose values are scaled by ``2**30``.
  Yearly RCA is scale-free, but the pooled panel is dominated by that year,
  so the pooled advantage matrix (and with it both proximity matrices) equals
  the year-0 pattern no matter how later years evolve.
* Every value lives on a binary grid (multiples of ``2**-36``) so sums of a
  cell's routed parts are exact and CSV round trips are bit-exact.
* Entry follows a two-step hazard. A cell off at ``t`` enters at ``t+1`` with
  probability ``q_t``; the next hazard is ``q_{t+1} = (F_t - q_t) / (1 - q_t)``
  where ``F_t = Phi(index_t)``. The outcome "advantaged from t+2 on" is then
  Bernoulli(``F_t``) given everything known at ``t``, i.e. exactly the probit
  law the estimator assumes (while the index never decreases, which holds with
  zero churn, static ports and non-negative slopes).
"""

from __future__ import annotations

import csv
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy import special

from .complexity import compute_proximity, compute_rca, density_matrix, rca_matrix, AdvantageCube
from .errors import InfeasibleConfig
from .ingest import write_continent_map, write_export_csv, write_pci_csv, write_product_registry
from .model import (
    Continent,
    ContinentMap,
    ExportPanel,
    Kind,
    PciTable,
    PortRegionMap,
    ProductCode,
    ROUTING_COLUMNS,
    validate_panel,
)

__all__ = ["SynthConfig", "SynthTruth", "SynthData", "generate", "write_synthetic"]

ANCHOR_SCALE = 2.0**30
GRID = 2.0**-36

COUNTRIES: dict[str, Continent] = {
    "CN": Continent.ASIA, "JP": Continent.ASIA, "VN": Continent.ASIA, "IN": Continent.ASIA,
    "DE": Continent.EUROPE, "FR": Continent.EUROPE, "NL": Continent.EUROPE,
    "US": Continent.NORTH_AMERICA, "MX": Continent.NORTH_AMERICA,
    "BR": Continent.SOUTH_AMERICA, "CL": Continent.SOUTH_AMERICA,
    "AU": Continent.OCEANIA, "NZ": Continent.OCEANIA,
    "ZA": Continent.AFRICA, "EG": Continent.AFRICA,
}  # fmt: skip

BETA_NAMES = ("const", "omega", "Omega", "k", "K", "PCI", "TRM")


@dataclass(frozen=True)
class SynthConfig:
    n_regions: int = 20
    n_ports: int = 8
    n_products: int = 200
    n_years: int = 12
    first_year: int = 2007
    n_communities: int = 5
    beta: Mapping[str, float] = field(
        default_factory=lambda: {"const": -3.3, "omega": 7.0, "Omega": 0.7, "k": 0.0, "K": 0.0, "PCI": 0.0, "TRM": 0.0}
    )
    churn: float = 0.0
    max_share: float = 0.9
    region_effect_sd: float = 0.2
    p_within: float = 0.45
    p_across: float = 0.04
    port_p_within: float = 0.5
    port_p_across: float = 0.08
    port_handles: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for name in ("n_regions", "n_ports", "n_products", "n_years", "n_communities"):
            if getattr(self, name) < 1:
                raise InfeasibleConfig(f"{name} must be at least 1")
        if self.n_communities > self.n_products:
            raise InfeasibleConfig("more communities than products")
        if self.n_products > 9000:
            raise InfeasibleConfig("at most 9000 distinct HS4 codes are available")
        if not 0.0 <= self.churn <= 1.0:
            raise InfeasibleConfig("churn must lie in [0, 1]")
        if not 0.0 < self.max_share < 1.0:
            raise InfeasibleConfig("max_share must lie in (0, 1)")
        unknown = set(self.beta) - set(BETA_NAMES)
        if unknown:
            raise InfeasibleConfig(f"unknown beta terms {sorted(unknown)}")
        if not 0 <= self.seed < 2**64:
            raise InfeasibleConfig("seed must be a 64-bit unsigned integer")

    def coef(self, name: str) -> float:
        return float(self.beta.get(name, 0.0))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["beta"] = {k: float(self.beta.get(k, 0.0)) for k in BETA_NAMES}
        return doc


@dataclass(frozen=True, eq=False)
class SynthTruth:
    """Ground truth logged while generating, aligned with the panels' axes."""

    omega: np.ndarray  # (region, product, year)
    Omega: np.ndarray  # (port, product, year); NaN where the port never handles the product
    m_region: np.ndarray
    m_port: np.ndarray
    entry: np.ndarray  # (region, product, year): entered advantage at year t+1
    index: np.ndarray  # planted linear index at each year (NaN where not a candidate)
    region_effect: np.ndarray
    hazard_violations: int
    capped_entries: int = 0  # entries withheld so no product is held by every region
    community: np.ndarray | None = None  # product -> planted community label


@dataclass(frozen=True, eq=False)
class SynthData:
    config: SynthConfig
    region_panel: ExportPanel
    port_panel: ExportPanel
    port_map: PortRegionMap
    pci: PciTable
    continents: ContinentMap
    products: tuple[ProductCode, ...]
    truth: SynthTruth

    def __iter__(self):
        # unpacks like the (region, port, map, pci) tuple
        return iter((self.region_panel, self.port_panel, self.port_map, self.pci))


def _product_codes(rng: np.random.Generator, n: int) -> list[str]:
    chapters = [c for c in range(1, 98) if c != 77]
    pool = np.array([c * 100 + h for c in chapters for h in range(1, 100)])
    picks = rng.choice(pool, size=n, replace=False)
    return sorted(f"{p:04d}" for p in picks)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(x / GRID) * GRID


def _initial_pattern(rng, n_loc, n_prod, groups, affinity, p_in, p_out) -> np.ndarray:
    within = groups[None, :] == affinity[:, None]
    m = rng.random((n_loc, n_prod)) < np.where(within, p_in, p_out)
    # every product needs an owner and every location at least two products
    for i in np.flatnonzero(~m.any(axis=0)):
        owners = np.flatnonzero(affinity == groups[i])
        m[rng.choice(owners) if owners.size else rng.integers(n_loc), i] = True
    for l in range(n_loc):
        while m[l].sum() < 2:
            m[l, rng.integers(n_prod)] = True
    return m


def _realize(m: np.ndarray, base: np.ndarray, eps: np.ndarray, scale: float, label: str) -> np.ndarray:
    """Values whose RCA pattern reproduces ``m`` exactly.

    Advantaged cells start at ``base / ubiquity`` so every product column has a
    similar total; cells still short of RCA 1 are nudged up a little at a
    time. Dense patterns where that stalls restart from :func:`_realize_lp`.
    """
    k = np.maximum(m.sum(axis=0), 1)
    starts = (lambda: _quantize(base / k[None, :]), lambda: _realize_lp(m, label))
    for start in starts:
        on = start()
        for _ in range(60):
            x = np.where(m, on, eps) * scale
            r = rca_matrix(x)
            short = m & ~(r >= 1.0 + 1e-9)
            if not short.any() and not (~m & (r >= 1.0)).any():
                return x
            on = np.where(short, _quantize(on * 1.05), on)
    bad = (r >= 1.0) != m
    l, p = np.argwhere(bad)[0]
    raise InfeasibleConfig(f"{label}: advantage pattern not realizable by RCA ({int(bad.sum())} cells, first at {l},{p})")


def _realize_lp(m: np.ndarray, label: str, margin: float = 1e-4) -> np.ndarray:
    """Solve for on-cell values as a transportation problem with lower bounds.

    With world shares ``s`` on the support of ``m``, row masses ``rho`` and
    column masses ``kappa``, a cell has RCA >= 1 exactly when
    ``s >= rho * kappa``. Fixing the masses at ``d_r / D`` and ``k_i / D``
    leaves a linear feasibility problem.
    """
    from scipy.optimize import linprog
    from scipy.sparse import coo_matrix, vstack

    rows, cols = np.nonzero(m)
    n = rows.size
    D = float(n)
    rho = m.sum(axis=1) / D
    kappa = m.sum(axis=0) / D
    lower = (1.0 + margin) * rho[rows] * kappa[cols]
    a_row = coo_matrix((np.ones(n), (rows, np.arange(n))), shape=(m.shape[0], n))
    a_col = coo_matrix((np.ones(n), (cols, np.arange(n))), shape=(m.shape[1], n))
    live_r = rho > 0
    live_c = kappa > 0
    A = vstack([a_row.tocsr()[live_r], a_col.tocsr()[live_c]]).tocsr()
    b = np.concatenate([rho[live_r], kappa[live_c]])
    # a flat objective keeps the solver from piling mass onto a few cells
    res = linprog(np.zeros(n), A_eq=A, b_eq=b, bounds=np.column_stack([lower, np.full(n, np.inf)]), method="highs")
    if res.status != 0:
        raise InfeasibleConfig(f"{label}: advantage pattern not realizable by RCA ({res.message})")
    out = np.zeros(m.shape)
    out[rows, cols] = _quantize(res.x * D)
    return out


def _split(value: np.ndarray, n_parts: np.ndarray, weights: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Split each cell value into up to 3 grid-exact parts that sum exactly."""
    w = weights * (np.arange(3)[None, :] < n_parts[:, None])
    w = w / w.sum(axis=1, keepdims=True)
    parts = np.round(value[:, None] * w / grid[:, None]) * grid[:, None]
    # put the rounding remainder on the first part: exact on the grid
    parts[:, 0] = value - parts[:, 1:].sum(axis=1)
    return parts


def generate(config: SynthConfig) -> SynthData:
    """Draw one synthetic world; see the module docstring for the design.

    Draw order in the single PCG64 stream: product codes, communities,
    affinities, initial patterns, size factors, routing, PCI, region effects,
    then one block of uniforms per year for entries and churn.
    """
    cfg = config
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    L, Pn, P, T = cfg.n_regions, cfg.n_ports, cfg.n_products, cfg.n_years
    if T < 3:
        raise InfeasibleConfig("need at least three years for any jump")
    years = tuple(range(cfg.first_year, cfg.first_year + T))
    products = _product_codes(rng, P)
    regions = tuple(f"R{n + 1:03d}" for n in range(L))
    ports = tuple(f"P{n + 1:03d}" for n in range(Pn))
    port_region = {ports[j]: regions[j % L] for j in range(Pn)}
    port_map = PortRegionMap.from_pairs(port_region.items())

    groups = rng.permutation(np.arange(P) % cfg.n_communities)
    r_aff = rng.permutation(np.arange(L) % cfg.n_communities)
    p_aff = rng.integers(cfg.n_communities, size=Pn)
    m0 = _initial_pattern(rng, L, P, groups, r_aff, cfg.p_within, cfg.p_across)
    pm = _initial_pattern(rng, Pn, P, groups, p_aff, cfg.port_p_within, cfg.port_p_across)
    handled = pm | (rng.random((Pn, P)) < cfg.port_handles)

    r_size = _quantize(rng.uniform(0.8, 1.25, L))
    g_size = _quantize(rng.uniform(0.8, 1.25, P))
    r_base = _quantize(np.outer(r_size, g_size))
    r_eps = _quantize(rng.uniform(1e-8, 1e-7, (L, P)))
    r_exports_off = rng.random((L, P)) < 0.5
    r_eps = np.where(r_exports_off, r_eps, 0.0)
    p_base = _quantize(np.outer(_quantize(rng.uniform(0.8, 1.25, Pn)), _quantize(rng.uniform(0.8, 1.25, P))))
    p_eps = np.where(handled & ~pm, _quantize(rng.uniform(1e-8, 1e-7, (Pn, P))), 0.0)

    # routing: region cells ship via 1-3 ports (own port first), port cells reach 1-3 countries
    own_port = {r: [j for j, p in enumerate(ports) if port_region[p] == r] for r in regions}
    r_nports = rng.integers(1, min(3, Pn) + 1, (L, P))
    r_route = np.empty((L, P, 3), dtype=np.int64)
    for l, r in enumerate(regions):
        for i in range(P):
            first = own_port[r][0] if own_port[r] else int(rng.integers(Pn))
            others = rng.permutation([j for j in range(Pn) if j != first])[:2]
            r_route[l, i] = ([first, *others.tolist()] + [first, first])[:3]
    r_w = rng.uniform(0.2, 1.0, (L, P, 3))
    countries = sorted(COUNTRIES)
    p_ncountry = rng.integers(1, 4, (Pn, P))
    p_route = np.stack([rng.permutation(len(countries))[:3] for _ in range(Pn * P)]).reshape(Pn, P, 3)
    p_w = rng.uniform(0.2, 1.0, (Pn, P, 3))

    pci_vals = np.round(rng.normal(0.0, 1.0, P), 6)
    region_effect = rng.normal(0.0, cfg.region_effect_sd, L) if cfg.region_effect_sd > 0 else np.zeros(L)

    phi = compute_proximity(_single(m0, Kind.REGION, regions, products)).values
    Phi = compute_proximity(_single(pm, Kind.PORT, ports, products)).values
    omega_port = np.where(handled, density_matrix(pm.astype(np.int8), Phi), np.nan)
    K_static = pm.sum(axis=0)
    trm_cell = np.where(r_eps > 0, np.minimum(r_nports, Pn), 0)  # TRM while a cell is off

    ports_of = [[j for j, p in enumerate(ports) if port_region[p] == r] for r in regions]
    Omega_reg = np.zeros((L, P))
    has_port = np.zeros(L, dtype=bool)
    for l in range(L):
        if ports_of[l]:
            vals = omega_port[ports_of[l]]
            defined = ~np.isnan(vals)
            cnt = defined.sum(axis=0)
            Omega_reg[l] = np.where(cnt > 0, np.nansum(vals, axis=0) / np.maximum(cnt, 1), 0.0)
            has_port[l] = True

    m = np.zeros((L, P, T), dtype=bool)
    m[:, :, 0] = m0
    omega = np.full((L, P, T), np.nan)
    index = np.full((L, P, T), np.nan)
    entry = np.zeros((L, P, T), dtype=bool)
    q = np.zeros((L, P))
    violations = 0
    capped = 0
    max_held = max(2, int(np.floor(cfg.max_share * P)))
    b = {name: cfg.coef(name) for name in BETA_NAMES}
    for t in range(T):
        cur = m[:, :, t]
        omega[:, :, t] = density_matrix(cur.astype(np.int8), phi)
        if t == T - 1:
            break
        u_entry = rng.random((L, P))
        u_churn = rng.random((L, P))
        k_now = cur.sum(axis=0)
        z = (
            b["const"]
            + b["omega"] * np.nan_to_num(omega[:, :, t])
            + b["Omega"] * Omega_reg * has_port[:, None]
            + b["k"] * k_now[None, :]
            + b["K"] * K_static[None, :]
            + b["PCI"] * pci_vals[None, :]
            + b["TRM"] * trm_cell
            + region_effect[:, None]
        )
        off = ~cur
        index[:, :, t] = np.where(off, z, np.nan)
        F = special.ndtr(z)
        if t == 0:
            q = 1.0 - np.sqrt(1.0 - F)
        hazard = np.where(off, q, 0.0)
        enters = off & (u_entry < hazard)
        # a product held by every region, or a region holding every product,
        # forces RCA == 1 exactly; cap both, withholding the least likely entries
        full = (cur | enters).all(axis=0) & ~cur.all(axis=0)
        for i in np.flatnonzero(full):
            cand = np.flatnonzero(enters[:, i])
            enters[cand[np.argmax(u_entry[cand, i])], i] = False
            capped += 1
        over = (cur | enters).sum(axis=1) - max_held
        for l in np.flatnonzero(over > 0):
            cand = np.flatnonzero(enters[l])
            drop = cand[np.argsort(-u_entry[l, cand], kind="stable")[: over[l]]]
            enters[l, drop] = False
            capped += drop.size
        entry[:, :, t] = enters
        nxt = cur | enters
        if cfg.churn > 0 and t >= 1:
            # a cell may drop out only once it has held the advantage for 3 years
            held = m[:, :, max(0, t - 2) : t + 1].all(axis=2) & (t >= 2)
            drop = held & (u_churn < cfg.churn)
            nxt = nxt & ~drop
        # never leave a location without advantage or a product without an owner
        nxt[nxt.sum(axis=1) == 0] = cur[nxt.sum(axis=1) == 0]
        lost = ~nxt.any(axis=0)
        nxt[:, lost] = cur[:, lost]
        m[:, :, t + 1] = nxt
        # next hazard for cells that stay off, from the two-step identity
        with np.errstate(divide="ignore", invalid="ignore"):
            q_next = (F - q) / (1.0 - q)
        bad = off & ~enters & (q_next < 0)
        violations += int(bad.sum())
        q = np.where(off & ~enters, np.clip(q_next, 0.0, 1.0), 0.0)

    # values
    r_vals = np.empty((L, P, T))
    p_vals = np.empty((Pn, P, T))
    for t in range(T):
        scale = ANCHOR_SCALE if t == 0 else 1.0
        r_vals[:, :, t] = _realize(m[:, :, t], r_base, r_eps, scale, f"regions, year {years[t]}")
        p_vals[:, :, t] = _realize(pm, p_base, p_eps, scale, f"ports, year {years[t]}")

    region_routing = _routing_frame(r_vals, regions, products, years, [ports[j] for j in range(Pn)], r_route, r_nports, r_w)
    port_routing = _routing_frame(p_vals, ports, products, years, countries, p_route, p_ncountry, p_w)
    r_vals = _cell_sums(region_routing, r_vals.shape, regions, products, years)
    p_vals = _cell_sums(port_routing, p_vals.shape, ports, products, years)
    region_panel = ExportPanel(Kind.REGION, regions, tuple(products), years, r_vals, region_routing)
    port_panel = ExportPanel(Kind.PORT, ports, tuple(products), years, p_vals, port_routing)

    for panel in (region_panel, port_panel):
        issues = validate_panel(panel)
        if issues:
            raise InfeasibleConfig(f"generated {panel.kind.value} panel invalid: {issues[:3]}")
    # the anchor year must pin the pooled advantage pattern
    pooled_r = compute_rca(region_panel, "pooled-window").m[:, :, 0].astype(bool)
    pooled_p = compute_rca(port_panel, "pooled-window").m[:, :, 0].astype(bool)
    if not (np.array_equal(pooled_r, m0) and np.array_equal(pooled_p, pm)):
        raise InfeasibleConfig("pooled advantage drifted away from the anchor year")

    Omega_truth = np.repeat(omega_port[:, :, None], T, axis=2)
    pci = PciTable({(products[i], y): float(pci_vals[i]) for i in range(P) for y in years})
    codes = tuple(ProductCode.from_hs4(c) for c in products)
    truth = SynthTruth(
        omega=omega,
        Omega=Omega_truth,
        m_region=m.astype(np.int8),
        m_port=np.repeat(pm[:, :, None], T, axis=2).astype(np.int8),
        entry=entry,
        index=index,
        region_effect=region_effect,
        hazard_violations=violations,
        capped_entries=capped,
        community=groups.astype(np.int64),
    )
    return SynthData(cfg, region_panel, port_panel, port_map, pci, ContinentMap(COUNTRIES), codes, truth)


def _single(m: np.ndarray, kind: Kind, locations, products) -> AdvantageCube:
    return AdvantageCube(kind, tuple(locations), tuple(products), (0,), m[:, :, None].astype(np.float64), window=(0, 0))


def _routing_frame(vals, locations, products, years, targets, route, n_parts, weights) -> pd.DataFrame:
    L, P, T = vals.shape
    l, p, t = np.nonzero(vals > 0)
    value = vals[l, p, t]
    # anchor-year values sit on a coarser grid scaled like the values
    grid = np.where(t == 0, GRID * ANCHOR_SCALE, GRID)
    parts = _split(value, n_parts[l, p], weights[l, p], grid)
    k = np.arange(3)
    used = (k[None, :] < n_parts[l, p][:, None]) & (parts > 0)
    rows_l = np.repeat(l, 3)[used.ravel()]
    rows_p = np.repeat(p, 3)[used.ravel()]
    rows_t = np.repeat(t, 3)[used.ravel()]
    rows_via = route[l, p].ravel()[used.ravel()]
    rows_v = parts.ravel()[used.ravel()]
    targets = np.asarray(targets, dtype=object)
    frame = pd.DataFrame(
        {
            "location": np.asarray(locations, dtype=object)[rows_l],
            "product": np.asarray(products, dtype=object)[rows_p],
            "year": np.asarray(years, dtype=np.int64)[rows_t],
            "via": targets[rows_via],
            "value": rows_v,
        },
        columns=ROUTING_COLUMNS,
    )
    frame = frame.sort_values(["location", "product", "year", "via"], kind="mergesort").reset_index(drop=True)
    return frame.astype({"year": np.int64, "value": np.float64})


def _cell_sums(routing: pd.DataFrame, shape, locations, products, years) -> np.ndarray:
    li = {c: n for n, c in enumerate(locations)}
    pi = {c: n for n, c in enumerate(products)}
    ti = {c: n for n, c in enumerate(years)}
    out = np.zeros(shape)
    l = routing["location"].map(li).to_numpy()
    p = routing["product"].map(pi).to_numpy()
    t = routing["year"].map(ti).to_numpy()
    np.add.at(out, (l, p, t), routing["value"].to_numpy())
    return out


def write_synthetic(data: SynthData, out_dir: str | Path) -> Path:
    """Write the CSV inputs plus a ready-to-run YAML config; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_export_csv(data.region_panel, out / "regions.csv")
    write_export_csv(data.port_panel, out / "ports.csv")
    write_pci_csv(data.pci, out / "pci_hs2002.csv", code_column="hs2002")
    with open(out / "concordance.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hs2002", "hs2017"])
        for code in data.region_panel.products:
            w.writerow([code, code])
    write_continent_map(data.continents, out / "continents.csv")
    write_product_registry(data.products, out / "products.csv")
    data.port_map.write_csv(out / "port_regions.csv")
    config = {
        "inputs": {
            "region_file": "regions.csv",
            "port_file": "ports.csv",
            "pci_file": "pci_hs2002.csv",
            "concordance_file": "concordance.csv",
            "continent_file": "continents.csv",
            "product_registry": "products.csv",
            "port_region_map": "port_regions.csv",
        },
        "synthetic": data.config.to_dict(),
    }
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    return path
