"""Domain types shared by every stage of the pipeline.

Panels are stored densely as ``(location, product, year)`` arrays over fixed
registries so that matrix shapes stay identical across years and panel kinds.
All containers are treated as immutable once built; numpy buffers are flagged
read-only.
"""

from __future__ import annotations

import csv
import enum
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources

import numpy as np
import pandas as pd

__all__ = [
    "Kind",
    "Continent",
    "ProductCode",
    "LocationId",
    "PortRegionMap",
    "ExportPanel",
    "PciTable",
    "ContinentMap",
    "Violation",
    "validate_panel",
    "hs_section",
    "leamer_class",
    "normalize_hs4",
    "load_reference_port_map",
]


class Kind(str, enum.Enum):
    REGION = "region"
    PORT = "port"


class Continent(str, enum.Enum):
    AFRICA = "Africa"
    ASIA = "Asia"
    EUROPE = "Europe"
    NORTH_AMERICA = "North America"
    SOUTH_AMERICA = "South America"
    OCEANIA = "Oceania"

    @classmethod
    def parse(cls, text: str) -> "Continent":
        key = text.strip().lower().replace("_", " ").replace("-", " ")
        for member in cls:
            if member.value.lower() == key or member.name.lower().replace("_", " ") == key:
                return member
        raise ValueError(f"unknown continent {text!r}")


# HS sections by first chapter of each section (chapter 77 is reserved).
_SECTION_STARTS = (1, 6, 15, 16, 25, 28, 39, 41, 44, 47, 50, 64, 68, 71, 72, 84, 86, 90, 93, 94, 97)


def normalize_hs4(code: str | int) -> str:
    """Zero-pad a four-digit HS code (``505`` -> ``"0505"``)."""
    text = str(code).strip()
    if text.endswith(".0"):
        text = text[:-2]
    if not text.isdigit() or len(text) > 4:
        raise ValueError(f"not an HS4 code: {code!r}")
    return text.zfill(4)


def hs_section(hs4: str) -> int:
    chapter = int(hs4[:2])
    if not 1 <= chapter <= 99:
        raise ValueError(f"invalid HS chapter in {hs4!r}")
    section = 0
    for idx, start in enumerate(_SECTION_STARTS, start=1):
        if chapter >= start:
            section = idx
    return section


@lru_cache(maxsize=1)
def _leamer_chapters() -> dict[int, int]:
    text = resources.files("portspill.data").joinpath("leamer_chapters.csv").read_text("utf-8")
    reader = csv.DictReader(text.splitlines())
    return {int(row["hs2"]): int(row["leamer"]) for row in reader}


def leamer_class(hs4: str) -> int | None:
    """Leamer category 1-10 from the bundled chapter table, or None if unknown."""
    return _leamer_chapters().get(int(hs4[:2]))


@dataclass(frozen=True, order=True)
class ProductCode:
    hs4: str
    section: int = field(compare=False)
    leamer: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.hs4) != 4 or not self.hs4.isdigit():
            raise ValueError(f"hs4 must be exactly four digits, got {self.hs4!r}")
        if not 1 <= self.section <= 21:
            raise ValueError(f"HS section out of range: {self.section}")
        if self.leamer is not None and not 1 <= self.leamer <= 10:
            raise ValueError(f"Leamer class out of range: {self.leamer}")

    @classmethod
    def from_hs4(cls, code: str | int, leamer: int | None = None) -> "ProductCode":
        hs4 = normalize_hs4(code)
        return cls(hs4, hs_section(hs4), leamer if leamer is not None else leamer_class(hs4))


@dataclass(frozen=True, order=True)
class LocationId:
    kind: Kind
    code: str


@dataclass(frozen=True)
class PortRegionMap:
    """Port -> owning region. A region may own several ports."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for port, region in self.pairs:
            if port in seen and seen[port] != region:
                raise ValueError(f"port {port!r} mapped to both {seen[port]!r} and {region!r}")
            seen[port] = region

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "PortRegionMap":
        return cls(tuple(sorted(set(pairs))))

    @cached_property
    def _by_port(self) -> dict[str, str]:
        return dict(self.pairs)

    @property
    def ports(self) -> tuple[str, ...]:
        return tuple(sorted(self._by_port))

    @property
    def regions(self) -> tuple[str, ...]:
        return tuple(sorted(set(self._by_port.values())))

    def region_of(self, port: str) -> str:
        return self._by_port[port]

    def ports_of(self, region: str) -> tuple[str, ...]:
        return tuple(p for p, r in self.pairs if r == region)

    def location_ids(self) -> list[LocationId]:
        return [LocationId(Kind.PORT, p) for p in self.ports] + [
            LocationId(Kind.REGION, r) for r in self.regions
        ]

    @classmethod
    def read_csv(cls, path) -> "PortRegionMap":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls.from_pairs((row["port"].strip(), row["region"].strip()) for row in csv.DictReader(fh))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["port", "region"])
            writer.writerows(self.pairs)


def load_reference_port_map() -> PortRegionMap:
    """The bundled 26-region port matching."""
    text = resources.files("portspill.data").joinpath("port_regions.csv").read_text("utf-8")
    rows = csv.DictReader(text.splitlines())
    return PortRegionMap.from_pairs((row["port"], row["region"]) for row in rows)


@dataclass(frozen=True, eq=False)
class ExportPanel:
    """Export values indexed by ``(location, product, year)``.

    Parameters
    ----------
    kind : Kind
        Region or port panel.
    locations, products, years : tuple
        Sorted registries giving the array axes. Products never observed still
        occupy a (zero) column.
    values : ndarray
        ``(len(locations), len(products), len(years))`` US dollar values.
    routing : DataFrame, optional
        Long table ``location, product, year, via, value`` where ``via`` is
        the shipping port (region panels) or destination country (port panels).
    """

    kind: Kind
    locations: tuple[str, ...]
    products: tuple[str, ...]
    years: tuple[int, ...]
    values: np.ndarray
    routing: pd.DataFrame | None = None

    def __post_init__(self):
        shape = (len(self.locations), len(self.products), len(self.years))
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} does not match registries {shape}")
        arr = np.array(self.values, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_cells(
        cls,
        kind: Kind,
        cells: Mapping[tuple[str, str, int], float] | Iterable[tuple[str, str, int, float]],
        *,
        locations: Iterable[str] | None = None,
        products: Iterable[str] | None = None,
        years: Iterable[int] | None = None,
        routing: Iterable[tuple[str, str, int, str, float]] | None = None,
    ) -> "ExportPanel":
        """Build a panel from (possibly repeated) cell records.

        Repeated keys are summed with :func:`math.fsum`, which is exactly
        rounded and therefore independent of input order.
        """
        items = cells.items() if isinstance(cells, Mapping) else ((c[:3], c[3]) for c in cells)
        grouped: dict[tuple[str, str, int], list[float]] = {}
        for key, value in items:
            grouped.setdefault((key[0], key[1], int(key[2])), []).append(float(value))
        locs = tuple(sorted(set(locations) if locations is not None else {k[0] for k in grouped}))
        prods = tuple(sorted(set(products) if products is not None else {k[1] for k in grouped}))
        yrs = tuple(sorted(set(years) if years is not None else {k[2] for k in grouped}))
        li = {c: n for n, c in enumerate(locs)}
        pi = {c: n for n, c in enumerate(prods)}
        ti = {c: n for n, c in enumerate(yrs)}
        values = np.zeros((len(locs), len(prods), len(yrs)))
        for (loc, prod, year), parts in grouped.items():
            values[li[loc], pi[prod], ti[year]] = math.fsum(parts)
        frame = None
        if routing is not None:
            frame = routing_frame(routing)
        return cls(kind, locs, prods, yrs, values, frame)

    @cached_property
    def location_index(self) -> dict[str, int]:
        return {c: n for n, c in enumerate(self.locations)}

    @cached_property
    def product_index(self) -> dict[str, int]:
        return {c: n for n, c in enumerate(self.products)}

    @cached_property
    def year_index(self) -> dict[int, int]:
        return {y: n for n, y in enumerate(self.years)}

    def value(self, location: str, product: str, year: int) -> float:
        return float(self.values[self.location_index[location], self.product_index[product], self.year_index[year]])

    def cells(self) -> Iterator[tuple[str, str, int, float]]:
        """Non-zero cells in (location, product, year) order."""
        for l, p, t in zip(*np.nonzero(self.values)):
            yield self.locations[l], self.products[p], self.years[t], float(self.values[l, p, t])

    def pooled(self, window: tuple[int, int] | None = None) -> np.ndarray:
        """Sum values over an inclusive year window (default: every year)."""
        lo, hi = window if window is not None else (self.years[0], self.years[-1])
        mask = np.array([lo <= y <= hi for y in self.years])
        # sequential reduction over a fixed axis order keeps this deterministic
        out = np.zeros(self.values.shape[:2])
        for t in np.flatnonzero(mask):
            out = out + self.values[:, :, t]
        return out

    def with_products(self, products: Iterable[str]) -> "ExportPanel":
        """Re-index onto a larger product universe (missing columns are zero)."""
        prods = tuple(sorted(set(products)))
        missing = set(self.products) - set(prods)
        if missing:
            raise ValueError(f"products {sorted(missing)[:5]} not in the new universe")
        values = np.zeros((len(self.locations), len(prods), len(self.years)))
        cols = [prods.index(p) for p in self.products]
        values[:, cols, :] = self.values
        return ExportPanel(self.kind, self.locations, prods, self.years, values, self.routing)

    def equals(self, other: "ExportPanel") -> bool:
        """Bit-exact equality of registries, values and routing."""
        if (self.kind, self.locations, self.products, self.years) != (
            other.kind,
            other.locations,
            other.products,
            other.years,
        ):
            return False
        if not np.array_equal(self.values, other.values):
            return False
        if (self.routing is None) != (other.routing is None):
            return False
        return self.routing is None or self.routing.equals(other.routing)

    def __eq__(self, other):
        if not isinstance(other, ExportPanel):
            return NotImplemented
        return self.equals(other)

    __hash__ = None


ROUTING_COLUMNS = ["location", "product", "year", "via", "value"]


def routing_frame(records: Iterable[tuple[str, str, int, str, float]]) -> pd.DataFrame:
    """Aggregate routing records into a canonical key-sorted frame."""
    grouped: dict[tuple[str, str, int, str], list[float]] = {}
    for loc, prod, year, via, value in records:
        grouped.setdefault((loc, prod, int(year), via), []).append(float(value))
    rows = [(*key, math.fsum(parts)) for key, parts in sorted(grouped.items())]
    frame = pd.DataFrame(rows, columns=ROUTING_COLUMNS)
    return frame.astype({"location": object, "product": object, "year": np.int64, "via": object, "value": np.float64})


@dataclass(frozen=True)
class PciTable:
    """PCI by ``(hs4, year)``; uncovered products are simply absent."""

    values: Mapping[tuple[str, int], float]

    def __post_init__(self):
        for key, v in self.values.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite PCI at {key}")

    def get(self, product: str, year: int) -> float | None:
        return self.values.get((product, year))

    def aligned(self, products: tuple[str, ...], years: tuple[int, ...]) -> np.ndarray:
        """``(product, year)`` array with NaN marking absent entries."""
        out = np.full((len(products), len(years)), np.nan)
        for i, p in enumerate(products):
            for t, y in enumerate(years):
                v = self.values.get((p, y))
                if v is not None:
                    out[i, t] = v
        return out

    def __len__(self):
        return len(self.values)


class ContinentMap(Mapping[str, Continent]):
    """Destination country code -> continent."""

    def __init__(self, mapping: Mapping[str, Continent] | None = None):
        self._map = dict(mapping or {})

    def __getitem__(self, key: str) -> Continent:
        return self._map[key]

    def __iter__(self):
        return iter(sorted(self._map))

    def __len__(self):
        return len(self._map)

    def __repr__(self):
        return f"ContinentMap({len(self)} countries)"


@dataclass(frozen=True)
class Violation:
    rule: str  # NegativeValue | NonFiniteValue | YearGap | RoutingMismatch | UnknownCode
    detail: str
    key: tuple = ()


def validate_panel(
    panel: ExportPanel,
    *,
    known_locations: Iterable[str] | None = None,
    known_products: Iterable[str] | None = None,
    known_via: Iterable[str] | None = None,
    rtol: float = 1e-6,
) -> list[Violation]:
    """Collect rule violations; an empty list means the panel is valid."""
    out: list[Violation] = []
    vals = panel.values
    for l, p, t in zip(*np.nonzero(~np.isfinite(vals))):
        key = (panel.locations[l], panel.products[p], panel.years[t])
        out.append(Violation("NonFiniteValue", f"non-finite value at {key}", key))
    for l, p, t in zip(*np.nonzero(vals < 0)):
        key = (panel.locations[l], panel.products[p], panel.years[t])
        out.append(Violation("NegativeValue", f"{vals[l, p, t]!r} at {key}", key))
    if panel.years:
        present = set(panel.years)
        for y in range(panel.years[0], panel.years[-1] + 1):
            if y not in present:
                out.append(Violation("YearGap", f"year {y} missing", (y,)))
    if known_locations is not None:
        known = set(known_locations)
        out += [Violation("UnknownCode", f"location {c!r}", (c,)) for c in panel.locations if c not in known]
    if known_products is not None:
        known = set(known_products)
        out += [Violation("UnknownCode", f"product {c!r}", (c,)) for c in panel.products if c not in known]
    if panel.routing is not None and len(panel.routing):
        r = panel.routing
        if (r["value"] < 0).any():
            for row in r[r["value"] < 0].itertuples(index=False):
                out.append(Violation("NegativeValue", f"routed value {row.value!r}", tuple(row[:4])))
        if known_via is not None:
            known = set(known_via)
            for code in sorted(set(r["via"]) - known):
                out.append(Violation("UnknownCode", f"routing target {code!r}", (code,)))
        if panel.kind is Kind.REGION:
            out += _routing_mismatches(panel, rtol)
    return out


def _routing_mismatches(panel: ExportPanel, rtol: float) -> list[Violation]:
    r = panel.routing
    li = r["location"].map(panel.location_index)
    pi = r["product"].map(panel.product_index)
    ti = r["year"].map(panel.year_index)
    known = (li.notna() & pi.notna() & ti.notna()).to_numpy()
    out = []
    for row in r[~known].itertuples(index=False):
        key = (row.location, row.product, int(row.year))
        out.append(Violation("RoutingMismatch", f"routed value at {key} outside the panel", key))
    routed = np.zeros(panel.values.shape)
    idx = tuple(a[known].to_numpy(dtype=np.int64) for a in (li, pi, ti))
    np.add.at(routed, idx, r["value"].to_numpy()[known])
    cell = panel.values
    bad = np.abs(routed - cell) > rtol * np.maximum(np.abs(cell), np.abs(routed))
    for l, p, t in zip(*np.nonzero(bad)):
        key = (panel.locations[l], panel.products[p], panel.years[t])
        out.append(
            Violation("RoutingMismatch", f"routed {routed[l, p, t]!r} vs cell {cell[l, p, t]!r} at {key}", key)
        )
    return out
