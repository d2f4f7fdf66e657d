"""Jump outcomes, estimation tables and sample splits.

A region *jumps* into product ``i`` at base year ``t`` when it has no
advantage at ``t`` (nor at ``t-2``, ``t-1``) and holds the advantage from
``t+2`` through ``t+4``. Near the edges of the panel some of those years do
not exist; :data:`BOUNDARY_POLICIES` decides what happens there.
"""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .complexity import AdvantageCube, RelatednessPanel
from .errors import UnmappedPort, WindowTooShort
from .model import ExportPanel, PciTable, PortRegionMap, leamer_class

__all__ = [
    "BOUNDARY_POLICIES",
    "PERIODS",
    "JumpPanel",
    "EstimationTable",
    "jump_rule",
    "detect_jumps",
    "read_jumps_csv",
    "build_region_table",
    "build_matched_table",
    "split_sample",
    "period_of",
]

BOUNDARY_POLICIES = ("truncate", "strict-skip", "footnote-literal")

# base-year ranges, inclusive
PERIODS: dict[str, tuple[int, int]] = {
    "crisis": (2007, 2009),
    "recovery": (2010, 2013),
    "post-crisis": (2014, 2018),
}

LEAMER_GROUPS = {"low": range(1, 7), "medium": range(7, 9), "high": range(9, 11)}


def period_of(year: int, periods: Mapping[str, tuple[int, int]] = PERIODS) -> str | None:
    for name, (lo, hi) in periods.items():
        if lo <= year <= hi:
            return name
    return None


def jump_rule(t: int, n_years: int, policy: str) -> tuple[bool, tuple[int, ...], tuple[int, ...]]:
    """Which offsets a base-year index ``t`` checks.

    Returns ``(eligible, must_be_one, must_be_zero)`` as year indices; the
    candidate condition ``M[t] == 0`` is implied and not listed.
    """
    if policy not in BOUNDARY_POLICIES:
        raise ValueError(f"unknown boundary policy {policy!r}")
    last = n_years - 1
    if t + 2 > last:
        return False, (), ()
    forward = tuple(y for y in (t + 2, t + 3, t + 4) if y <= last)
    backward = tuple(y for y in (t - 2, t - 1) if y >= 0)
    if policy == "strict-skip":
        if t - 2 < 0 or t + 4 > last:
            return False, (), ()
    elif policy == "footnote-literal":
        early = t - 2 < 0  # backward window incomplete
        late = t + 4 > last  # forward window incomplete
        if early:
            forward = (t + 2,)
        if late:
            backward = ()
    return True, forward, backward


@dataclass(frozen=True, eq=False)
class JumpPanel:
    """Jump indicator ``s`` and candidate mask, both ``(region, product, year)``.

    ``s`` is only meaningful where ``candidate`` is true (it is 0 elsewhere).
    """

    locations: tuple[str, ...]
    products: tuple[str, ...]
    years: tuple[int, ...]
    s: np.ndarray
    candidate: np.ndarray
    policy: str

    def write_csv(self, path: str | Path) -> None:
        l, p, t = np.nonzero(self.candidate)
        frame = pd.DataFrame(
            {
                "region": np.asarray(self.locations, dtype=object)[l],
                "product": np.asarray(self.products, dtype=object)[p],
                "year": np.asarray(self.years, dtype=np.int64)[t],
                "S": self.s[l, p, t].astype(np.int64),
            }
        )
        frame.to_csv(path, index=False, lineterminator="\n")


def read_jumps_csv(
    path: str | Path,
    locations: tuple[str, ...],
    products: tuple[str, ...],
    years: tuple[int, ...],
    policy: str,
) -> JumpPanel:
    """Inverse of :meth:`JumpPanel.write_csv` given the registries."""
    frame = pd.read_csv(path, dtype={"region": str, "product": str}, keep_default_na=False)
    shape = (len(locations), len(products), len(years))
    s = np.zeros(shape, dtype=np.int8)
    cand = np.zeros(shape, dtype=bool)
    l = frame["region"].map({c: n for n, c in enumerate(locations)}).to_numpy(dtype=np.int64)
    p = frame["product"].map({c: n for n, c in enumerate(products)}).to_numpy(dtype=np.int64)
    t = frame["year"].map({y: n for n, y in enumerate(years)}).to_numpy(dtype=np.int64)
    cand[l, p, t] = True
    s[l, p, t] = frame["S"].to_numpy(dtype=np.int8)
    return JumpPanel(tuple(locations), tuple(products), tuple(years), s, cand, policy)


def detect_jumps(cube: AdvantageCube, policy: str = "truncate") -> JumpPanel:
    """Mark candidate (region, product, base-year) triples and their outcome.

    Raises
    ------
    WindowTooShort
        No base year is eligible under ``policy``.
    """
    years = cube.years
    if cube.pooled or list(years) != list(range(years[0], years[0] + len(years))):
        raise ValueError("jump detection needs a per-year cube over contiguous years")
    m = cube.m
    n = len(years)
    s = np.zeros(m.shape, dtype=np.int8)
    cand = np.zeros(m.shape, dtype=bool)
    any_eligible = False
    for t in range(n):
        eligible, ones, zeros = jump_rule(t, n, policy)
        if not eligible:
            continue
        any_eligible = True
        c = m[:, :, t] == 0
        ok = c.copy()
        for y in ones:
            ok &= m[:, :, y] == 1
        for y in zeros:
            ok &= m[:, :, y] == 0
        cand[:, :, t] = c
        s[:, :, t] = ok
    if not any_eligible:
        raise WindowTooShort(f"{n} years admit no base year under policy {policy!r}")
    return JumpPanel(cube.locations, cube.products, years, s, cand, policy)


@dataclass(frozen=True, eq=False)
class EstimationTable:
    """Complete-case observation table plus a drop report.

    ``frame`` rows are sorted by region, port (matched tables), product, year.
    ``leamer`` is 0 when the class is unknown; ``period`` is empty outside the
    three named periods.
    """

    frame: pd.DataFrame
    matched: bool = False
    drops: Mapping[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.frame)

    @property
    def year_levels(self) -> list[int]:
        return sorted(self.frame["year"].unique().tolist())

    @property
    def region_levels(self) -> list[str]:
        return sorted(self.frame["region"].unique().tolist())

    def write_csv(self, path: str | Path) -> None:
        self.frame.to_csv(path, index=False, lineterminator="\n", float_format=None)

    def write_drop_report(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dict(sorted(self.drops.items())), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path: str | Path, matched: bool | None = None) -> "EstimationTable":
        frame = pd.read_csv(
            path,
            dtype={"product": str, "region": str, "port": str, "period": str},
            keep_default_na=False,
            float_precision="round_trip",
        )
        is_matched = "port" in frame.columns if matched is None else matched
        return cls(frame, is_matched)


REGION_COLUMNS = ["region", "product", "year", "S", "omega", "k", "PCI", "TRM", "leamer", "period"]
MATCHED_COLUMNS = ["region", "port", "product", "year", "S", "omega", "Omega", "k", "K", "PCI", "TRM", "DES", "leamer", "period"]


def build_region_table(
    jumps: JumpPanel,
    density: RelatednessPanel,
    cube: AdvantageCube,
    pci: PciTable,
    trm: Mapping[tuple[str, str, int], int],
    leamer: Mapping[str, int | None] | None = None,
    periods: Mapping[str, tuple[int, int]] = PERIODS,
) -> EstimationTable:
    """One row per candidate with defined density and PCI.

    TRM absent from the map means no routed shipments, i.e. zero ports.
    """
    if not (jumps.locations == density.locations == cube.locations):
        raise ValueError("jumps, density and cube disagree on regions")
    if not (jumps.products == density.products == cube.products):
        raise ValueError("jumps, density and cube disagree on products")
    years = jumps.years
    d_idx = {y: n for n, y in enumerate(density.years)}
    c_idx = cube.year_index
    pci_arr = pci.aligned(jumps.products, years)
    drops: Counter = Counter()
    l, p, t = np.nonzero(jumps.candidate)  # C order: region, product, year
    drops["candidates"] = len(l)
    dens_t = np.array([d_idx.get(y, -1) for y in years])
    dt = dens_t[t]
    omega = np.where(dt >= 0, density.density[l, p, np.maximum(dt, 0)], np.nan)
    no_omega = np.isnan(omega)
    pci_v = pci_arr[p, t]
    no_pci = ~no_omega & np.isnan(pci_v)
    drops["undefined_omega"] = int(no_omega.sum())
    drops["missing_pci"] = int(no_pci.sum())
    keep = ~no_omega & ~no_pci
    l, p, t, omega, pci_v = l[keep], p[keep], t[keep], omega[keep], pci_v[keep]
    loc = np.asarray(jumps.locations, dtype=object)
    prod = np.asarray(jumps.products, dtype=object)
    yr = np.asarray(years, dtype=np.int64)
    cube_t = np.array([c_idx[y] for y in years])
    region_col, product_col, year_col = loc[l], prod[p], yr[t]
    trm_col = np.array(
        [trm.get((r, q, int(y)), 0) for r, q, y in zip(region_col, product_col, year_col)], dtype=np.int64
    )
    leamer_col = np.array([_leamer(q, leamer) for q in jumps.products], dtype=np.int64)[p]
    period_names = np.array([period_of(int(y), periods) or "" for y in years], dtype=object)
    frame = pd.DataFrame(
        {
            "region": region_col,
            "product": product_col,
            "year": year_col,
            "S": jumps.s[l, p, t].astype(np.int64),
            "omega": omega.astype(np.float64),
            "k": cube.ubiquity[p, cube_t[t]].astype(np.int64),
            "PCI": pci_v.astype(np.float64),
            "TRM": trm_col,
            "leamer": leamer_col,
            "period": period_names[t],
        },
        columns=REGION_COLUMNS,
    )
    frame = _typed(frame).sort_values(["region", "product", "year"], kind="mergesort").reset_index(drop=True)
    drops["retained"] = len(frame)
    return EstimationTable(frame, False, dict(drops))


def _leamer(code: str, table: Mapping[str, int | None] | None) -> int:
    if table is not None and code in table:
        v = table[code]
    else:
        try:
            v = leamer_class(code)
        except ValueError:
            v = None
    return int(v) if v else 0


def _typed(frame: pd.DataFrame) -> pd.DataFrame:
    types = {
        "region": object, "port": object, "product": object, "year": np.int64, "S": np.int64,
        "omega": np.float64, "Omega": np.float64, "k": np.int64, "K": np.int64, "PCI": np.float64,
        "TRM": np.int64, "DES": np.int64, "leamer": np.int64, "period": object,
    }  # fmt: skip
    return frame.astype({c: t for c, t in types.items() if c in frame.columns})


def build_matched_table(
    region_table: EstimationTable,
    port_density: RelatednessPanel,
    port_cube: AdvantageCube,
    port_map: PortRegionMap,
    port_panel: ExportPanel | None = None,
    des: Mapping[tuple[str, str, int], int] | None = None,
) -> EstimationTable:
    """Join each region row to every port of that region.

    A joined row is dropped when the port never handles the product in the
    pooled port panel or when the port density is undefined for it.
    """
    for port in port_cube.locations:
        if port not in port_map._by_port:
            raise UnmappedPort(port)
    p_loc = port_cube.location_index
    p_prod = port_cube.product_index
    p_year = {y: n for n, y in enumerate(port_density.years)}
    handled = None
    if port_panel is not None:
        handled = port_panel.pooled() > 0
        h_loc, h_prod = port_panel.location_index, port_panel.product_index
    drops: Counter = Counter()
    frame = region_table.frame
    pairs = pd.DataFrame(
        [(r, port) for r in port_map.regions for port in port_map.ports_of(r) if port in p_loc],
        columns=["region", "port"],
    )
    has_port = frame["region"].isin(set(pairs["region"])).to_numpy()
    drops["region_without_port"] = int((~has_port).sum())
    j = frame[has_port].reset_index(drop=True)
    j["_row"] = np.arange(len(j))
    j = j.merge(pairs, on="region", how="inner", sort=False)
    j = j.sort_values(["_row", "port"], kind="mergesort").reset_index(drop=True)
    drops["joined"] = len(j)
    pl = j["port"].map(p_loc).to_numpy(dtype=np.int64)
    pi = j["product"].map(p_prod)
    py = j["year"].map(p_year)
    missing = (pi.isna() | py.isna()).to_numpy()
    drops["port_missing_product_or_year"] = int(missing.sum())
    pi = pi.fillna(0).to_numpy(dtype=np.int64)
    py = py.fillna(0).to_numpy(dtype=np.int64)
    ok = ~missing
    if handled is not None:
        hp = j["product"].map(h_prod)
        hl = j["port"].map(h_loc).to_numpy(dtype=np.int64)
        known = hp.notna().to_numpy()
        hpv = hp.fillna(0).to_numpy(dtype=np.int64)
        is_handled = known & handled[hl, hpv]
        drops["port_not_handling_product"] = int((ok & ~is_handled).sum())
        ok &= is_handled
    omega_p = np.where(ok, port_density.density[pl, pi, py], np.nan)
    undefined = ok & np.isnan(omega_p)
    drops["undefined_Omega"] = int(undefined.sum())
    ok &= ~undefined
    j = j[ok].reset_index(drop=True)
    j["Omega"] = omega_p[ok]
    cube_year = np.array([port_cube.year_index[y] for y in j["year"]], dtype=np.int64)
    j["K"] = port_cube.ubiquity[pi[ok], cube_year].astype(np.int64) if len(j) else np.zeros(0, dtype=np.int64)
    if des is not None:
        j["DES"] = [int(des.get((q, r, int(y)), 0)) for q, r, y in zip(j["port"], j["product"], j["year"])]
    else:
        j["DES"] = 0
    out = j[MATCHED_COLUMNS]
    if des is None:
        out = out.drop(columns=["DES"])
    out = _typed(out).sort_values(["region", "port", "product", "year"], kind="mergesort").reset_index(drop=True)
    drops["retained"] = len(out)
    return EstimationTable(out, True, dict(drops))


def split_sample(
    table: EstimationTable,
    scheme: str,
    periods: Mapping[str, tuple[int, int]] = PERIODS,
) -> dict[str, EstimationTable]:
    """Partition rows by PCI mean, Leamer sophistication group, or period.

    ``pci-mean`` uses this table's own PCI mean; rows exactly at the mean go
    to ``high``. Unknown-Leamer rows and years outside every period are left
    out of the respective schemes.
    """
    frame = table.frame
    if scheme == "pci-mean":
        mean = float(frame["PCI"].mean())
        masks = {"low": frame["PCI"] < mean, "high": frame["PCI"] >= mean}
    elif scheme == "leamer-groups":
        masks = {name: frame["leamer"].isin(list(rng)) for name, rng in LEAMER_GROUPS.items()}
    elif scheme == "periods":
        masks = {name: frame["year"].between(lo, hi) for name, (lo, hi) in periods.items()}
    else:
        raise ValueError(f"unknown split scheme {scheme!r}")
    return {
        name: EstimationTable(frame[mask].reset_index(drop=True), table.matched, {"retained": int(mask.sum())})
        for name, mask in masks.items()
    }
