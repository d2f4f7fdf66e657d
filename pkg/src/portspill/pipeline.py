"""In-memory pipeline: panels -> advantage -> proximity -> density -> tables.

The CLI runs the same stages one command at a time with artifacts on disk;
this module chains them for tests and Monte Carlo work.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

from .complexity import (
    AdvantageCube,
    ProximityMatrix,
    RelatednessPanel,
    compute_des,
    compute_density,
    compute_proximity,
    compute_rca,
    compute_trm,
)
from .model import ContinentMap, ExportPanel, PciTable, PortRegionMap
from .outcomes import PERIODS, EstimationTable, JumpPanel, build_matched_table, build_region_table, detect_jumps

__all__ = ["PipelineOptions", "PipelineResult", "run_pipeline"]


@dataclass(frozen=True)
class PipelineOptions:
    proximity_window: tuple[int, int] | None = None  # None: the panel's full span
    boundary_policy: str = "truncate"
    periods: Mapping[str, tuple[int, int]] = field(default_factory=lambda: dict(PERIODS))


@dataclass(frozen=True, eq=False)
class PipelineResult:
    region_cube: AdvantageCube
    port_cube: AdvantageCube
    phi: ProximityMatrix
    Phi: ProximityMatrix
    omega: RelatednessPanel
    Omega: RelatednessPanel
    jumps: JumpPanel
    region_table: EstimationTable
    matched_table: EstimationTable


def run_pipeline(
    region_panel: ExportPanel,
    port_panel: ExportPanel,
    port_map: PortRegionMap,
    pci: PciTable,
    continents: ContinentMap | None = None,
    leamer: Mapping[str, int | None] | None = None,
    options: PipelineOptions = PipelineOptions(),
) -> PipelineResult:
    window = options.proximity_window
    region_cube = compute_rca(region_panel, "per-year")
    port_cube = compute_rca(port_panel, "per-year")
    phi = compute_proximity(compute_rca(region_panel, "pooled-window", window))
    Phi = compute_proximity(compute_rca(port_panel, "pooled-window", window))
    omega = compute_density(region_cube, phi)
    Omega = compute_density(port_cube, Phi)
    jumps = detect_jumps(region_cube, options.boundary_policy)
    trm = compute_trm(region_panel) if region_panel.routing is not None else {}
    region_table = build_region_table(jumps, omega, region_cube, pci, trm, leamer, options.periods)
    des = compute_des(port_panel, continents) if continents is not None and port_panel.routing is not None else None
    matched = build_matched_table(region_table, Omega, port_cube, port_map, port_panel, des)
    return PipelineResult(region_cube, port_cube, phi, Phi, omega, Omega, jumps, region_table, matched)
