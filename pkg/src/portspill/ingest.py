"""CSV ingestion: export panels, PCI tables, HS concordance, continent lookup.

File layouts (UTF-8, header row required)::

    region file   region, product, year, port, [destination_country], value
    port file     port, product, year, destination_country, value
    PCI file      hs2002, year, pci
    concordance   hs2002, hs2017
    continents    country, continent
    products      hs4, [section], [leamer]

Column names can be remapped with a :class:`Schema`.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from .errors import (
    ConflictingMapping,
    MalformedRow,
    MissingConcordance,
    UnknownLocationCode,
    UnknownProductCode,
)
from .model import (
    Continent,
    ContinentMap,
    ExportPanel,
    Kind,
    PciTable,
    ProductCode,
    normalize_hs4,
)

__all__ = [
    "Schema",
    "HsConcordance",
    "load_export_csv",
    "write_export_csv",
    "load_pci_csv",
    "write_pci_csv",
    "load_concordance",
    "convert_pci",
    "load_continent_map",
    "write_continent_map",
    "load_product_registry",
    "write_product_registry",
]

_DEFAULT_COLUMNS = {
    Kind.REGION: {"location": "region", "product": "product", "year": "year", "via": "port", "value": "value"},
    Kind.PORT: {
        "location": "port",
        "product": "product",
        "year": "year",
        "via": "destination_country",
        "value": "value",
    },
}


@dataclass(frozen=True)
class Schema:
    """Maps the canonical fields onto a file's column names.

    ``via`` is the routing column: the shipping port for region files, the
    destination country for port files.
    """

    location: str
    product: str = "product"
    year: str = "year"
    via: str | None = None
    value: str = "value"

    @classmethod
    def default(cls, kind: Kind) -> "Schema":
        return cls(**_DEFAULT_COLUMNS[kind])

    @classmethod
    def from_mapping(cls, kind: Kind, mapping: Mapping[str, str] | None) -> "Schema":
        cols = dict(_DEFAULT_COLUMNS[kind])
        for key, value in (mapping or {}).items():
            if key not in cols:
                raise ValueError(f"unknown schema field {key!r}")
            cols[key] = value
        return cls(**cols)


def _fmt(value: float) -> str:
    # repr is the shortest string that round-trips to the same float
    return repr(float(value))


def _parse_value(text: str, line: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise MalformedRow(line, f"value {text!r} is not a number") from None
    if not math.isfinite(value):
        raise MalformedRow(line, f"value {text!r} is not finite")
    if value < 0:
        raise MalformedRow(line, f"negative value {text!r}")
    return value


def _parse_year(text: str, line: int) -> int:
    try:
        return int(str(text).strip())
    except (TypeError, ValueError):
        raise MalformedRow(line, f"year {text!r} is not an integer") from None


def _parse_product(text: str, line: int) -> str:
    try:
        return normalize_hs4(text)
    except ValueError:
        raise MalformedRow(line, f"product {text!r} is not an HS4 code") from None


def _reader(path: Path, required: Iterable[str]):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise MalformedRow(1, f"missing columns {missing}")
    return fh, reader


def load_export_csv(
    path: str | Path,
    kind: Kind | str,
    schema: Schema | Mapping[str, str] | None = None,
    *,
    products: Iterable[str] | None = None,
    locations: Iterable[str] | None = None,
    via_codes: Iterable[str] | None = None,
) -> ExportPanel:
    """Parse an export file into a panel.

    Rows sharing a key are summed. When a routing column is declared, every
    non-empty routing entry is kept in ``panel.routing`` and the cell value is
    the exact sum of its routed parts.

    Parameters
    ----------
    products, locations : iterable of str, optional
        Registries. Codes outside them raise :class:`UnknownProductCode` /
        :class:`UnknownLocationCode`; the product registry also fixes the
        column axis so unobserved products keep a zero column.
    via_codes : iterable of str, optional
        Registry for the routing column (e.g. known ports for region files).
    """
    kind = Kind(kind)
    if schema is None or isinstance(schema, Mapping):
        schema = Schema.from_mapping(kind, schema)
    path = Path(path)
    product_set = {normalize_hs4(p) for p in products} if products is not None else None
    location_set = set(locations) if locations is not None else None
    via_set = set(via_codes) if via_codes is not None else None
    required = [schema.location, schema.product, schema.year, schema.value]
    cells: list[tuple[str, str, int, float]] = []
    routing: list[tuple[str, str, int, str, float]] = []
    fh, reader = _reader(path, required)
    has_via = schema.via is not None and schema.via in (reader.fieldnames or [])
    with fh:
        for line, row in enumerate(reader, start=2):
            if None in row or any(row.get(c) is None for c in required):
                raise MalformedRow(line, "wrong number of fields")
            loc = row[schema.location].strip()
            if not loc:
                raise MalformedRow(line, "empty location code")
            prod = _parse_product(row[schema.product], line)
            year = _parse_year(row[schema.year], line)
            value = _parse_value(row[schema.value], line)
            if product_set is not None and prod not in product_set:
                raise UnknownProductCode(prod, line)
            if location_set is not None and loc not in location_set:
                raise UnknownLocationCode(loc, line)
            via = (row.get(schema.via) or "").strip() if has_via else ""
            if via:
                if via_set is not None and via not in via_set:
                    raise UnknownLocationCode(via, line)
                routing.append((loc, prod, year, via, value))
            cells.append((loc, prod, year, value))
    return ExportPanel.from_cells(
        kind,
        cells,
        locations=location_set,
        products=product_set,
        routing=routing if routing else None,
    )


def write_export_csv(panel: ExportPanel, path: str | Path, schema: Schema | None = None) -> None:
    """Inverse of :func:`load_export_csv`; floats are written round-trip exact.

    With routing present one row per routed part is written; cells without
    routing get an empty routing field.
    """
    schema = schema or Schema.default(panel.kind)
    via_col = schema.via or ("port" if panel.kind is Kind.REGION else "destination_country")
    header = [schema.location, schema.product, schema.year, via_col, schema.value]
    routed: set[tuple[str, str, int]] = set()
    rows: list[tuple] = []
    if panel.routing is not None:
        for loc, prod, year, via, value in panel.routing.itertuples(index=False):
            rows.append((loc, prod, int(year), via, value))
            routed.add((loc, prod, int(year)))
    for loc, prod, year, value in panel.cells():
        if (loc, prod, year) not in routed:
            rows.append((loc, prod, year, "", value))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for loc, prod, year, via, value in rows:
            writer.writerow([loc, prod, year, via, _fmt(value)])


@dataclass(frozen=True)
class HsConcordance:
    """HS2002 four-digit code -> set of HS2017 four-digit codes."""

    forward: Mapping[str, frozenset[str]]

    def __post_init__(self):
        for code, targets in self.forward.items():
            if not targets:
                raise ValueError(f"HS2002 code {code!r} maps to no HS2017 code")

    @cached_property
    def reverse(self) -> dict[str, frozenset[str]]:
        rev: dict[str, set[str]] = {}
        for src, targets in self.forward.items():
            for tgt in targets:
                rev.setdefault(tgt, set()).add(src)
        return {k: frozenset(v) for k, v in sorted(rev.items())}


def load_concordance(path: str | Path) -> HsConcordance:
    fh, reader = _reader(Path(path), ["hs2002", "hs2017"])
    fwd: dict[str, set[str]] = {}
    with fh:
        for line, row in enumerate(reader, start=2):
            src = _parse_product(row["hs2002"], line)
            tgt = _parse_product(row["hs2017"], line)
            fwd.setdefault(src, set()).add(tgt)
    return HsConcordance({k: frozenset(v) for k, v in sorted(fwd.items())})


def load_pci_csv(path: str | Path, code_column: str = "hs2002") -> PciTable:
    fh, reader = _reader(Path(path), [code_column, "year", "pci"])
    values: dict[tuple[str, int], float] = {}
    with fh:
        for line, row in enumerate(reader, start=2):
            code = _parse_product(row[code_column], line)
            year = _parse_year(row["year"], line)
            try:
                pci = float(row["pci"])
            except (TypeError, ValueError):
                raise MalformedRow(line, f"pci {row['pci']!r} is not a number") from None
            if not math.isfinite(pci):
                raise MalformedRow(line, "pci is not finite")
            if (code, year) in values and values[(code, year)] != pci:
                raise MalformedRow(line, f"duplicate PCI for {(code, year)}")
            values[(code, year)] = pci
    return PciTable(dict(sorted(values.items())))


def write_pci_csv(table: PciTable, path: str | Path, code_column: str = "hs2017") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([code_column, "year", "pci"])
        for (code, year), value in sorted(table.values.items()):
            writer.writerow([code, year, _fmt(value)])


def convert_pci(raw: PciTable, conc: HsConcordance) -> PciTable:
    """Re-key PCI from HS2002 to HS2017.

    Each HS2017 code takes the unweighted mean over the HS2002 codes mapping
    to it that have a value that year. HS2017 codes with no source are absent.
    """
    for code, _ in raw.values:
        if code not in conc.forward:
            raise MissingConcordance(code)
    pooled: dict[tuple[str, int], list[float]] = {}
    for (code, year), value in sorted(raw.values.items()):
        for target in sorted(conc.forward[code]):
            pooled.setdefault((target, year), []).append(value)
    return PciTable({k: math.fsum(v) / len(v) for k, v in sorted(pooled.items())})


def load_continent_map(path: str | Path) -> ContinentMap:
    fh, reader = _reader(Path(path), ["country", "continent"])
    mapping: dict[str, Continent] = {}
    with fh:
        for line, row in enumerate(reader, start=2):
            country = row["country"].strip()
            try:
                continent = Continent.parse(row["continent"])
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
            if country in mapping and mapping[country] is not continent:
                raise ConflictingMapping(country)
            mapping[country] = continent
    return ContinentMap(mapping)


def write_continent_map(cmap: ContinentMap, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["country", "continent"])
        for country in cmap:
            writer.writerow([country, cmap[country].value])


def load_product_registry(path: str | Path) -> list[ProductCode]:
    """Read the product universe; section/leamer default from bundled tables."""
    fh, reader = _reader(Path(path), ["hs4"])
    out: dict[str, ProductCode] = {}
    with fh:
        for line, row in enumerate(reader, start=2):
            hs4 = _parse_product(row["hs4"], line)
            leamer_text = (row.get("leamer") or "").strip()
            leamer = None
            if leamer_text and leamer_text.lower() != "unknown":
                leamer = int(leamer_text)
            try:
                out[hs4] = ProductCode.from_hs4(hs4, leamer)
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
    return [out[k] for k in sorted(out)]


def write_product_registry(products: Iterable[ProductCode], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["hs4", "section", "leamer"])
        for p in sorted(products):
            writer.writerow([p.hs4, p.section, p.leamer if p.leamer is not None else "unknown"])
