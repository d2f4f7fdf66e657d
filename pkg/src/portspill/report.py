"""Regression tables in the layout of a journal results table.

Each fitted model is one column: coefficient with significance stars, the
cluster-robust standard error in parentheses underneath, and a footer with
observations, pseudo-R², log-likelihood and mean VIF.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import pandas as pd

from .econometrics import ModelFit

__all__ = ["stars", "ROW_ORDER", "ROW_LABELS", "format_table", "table_frame"]

ROW_ORDER = ("omega", "Omega", "k", "K", "PCI", "TRM", "DES", "const")
ROW_LABELS = {
    "omega": "Production density (omega)",
    "Omega": "Transport density (Omega)",
    "k": "Region ubiquity (k)",
    "K": "Port ubiquity (K)",
    "PCI": "PCI",
    "TRM": "Ports used (TRM)",
    "DES": "Destination continents (DES)",
    "const": "Constant",
}


def stars(p: float) -> str:
    """``***`` below 0.01, ``**`` below 0.05, ``*`` below 0.1."""
    if not math.isfinite(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def _rows(fits: Sequence[ModelFit]) -> list[str]:
    present = {n for f in fits for n in f.names if not n.startswith(("year=", "region="))}
    ordered = [n for n in ROW_ORDER if n in present]
    return ordered + sorted(present - set(ordered))


def table_frame(fits: Sequence[ModelFit], labels: Sequence[str] | None = None) -> pd.DataFrame:
    """Long-form numeric table: one row per (model, term) plus footer stats."""
    labels = list(labels) if labels is not None else [f.label or f"({n + 1})" for n, f in enumerate(fits)]
    rows = []
    for label, f in zip(labels, fits):
        coefs = f.coefficients
        for name in _rows([f]):
            b, se, stat, p = coefs[name]
            rows.append((label, name, b, se, stat, p, stars(p)))
        for key, value in (
            ("observations", f.n_obs),
            ("clusters", f.n_clusters),
            (f"r2_{f.r2_kind.lower()}", f.pseudo_r2),
            ("loglik", f.loglik),
            ("mean_vif", f.mean_vif),
        ):
            rows.append((label, key, value, math.nan, math.nan, math.nan, ""))
    return pd.DataFrame(rows, columns=["model", "term", "estimate", "se", "stat", "p", "stars"])


def format_table(
    fits: Sequence[ModelFit],
    labels: Sequence[str] | None = None,
    title: str = "",
    digits: int = 3,
    width: int = 14,
    show_stars: bool = True,
) -> str:
    """Fixed-width text table; terms absent from a model are left blank."""
    labels = list(labels) if labels is not None else [f.label or f"({n + 1})" for n, f in enumerate(fits)]
    names = _rows(fits)
    stub = max([len(ROW_LABELS.get(n, n)) for n in names] + [len("Log likelihood"), len("Dependent: S")]) + 2
    rule = "-" * (stub + width * len(fits))
    lines = []
    if title:
        lines.append(title)
    lines.append("=" * len(rule))
    lines.append("Dependent: S".ljust(stub) + "".join(lab.rjust(width) for lab in labels))
    lines.append("".ljust(stub) + "".join(f.family.rjust(width) for f in fits))
    lines.append(rule)
    for name in names:
        top, bottom = [], []
        for f in fits:
            if name in f.names:
                b, se, _, p = f.coefficients[name]
                mark = stars(p) if show_stars else ""
                top.append(f"{b:.{digits}f}{mark}".rjust(width))
                bottom.append(f"({se:.{digits}f})".rjust(width))
            else:
                top.append("".rjust(width))
                bottom.append("".rjust(width))
        lines.append(ROW_LABELS.get(name, name).ljust(stub) + "".join(top))
        lines.append("".ljust(stub) + "".join(bottom))
    lines.append(rule)
    fe_year = ["Yes" if any(n.startswith("year=") for n in f.names) else "No" for f in fits]
    fe_region = ["Yes" if any(n.startswith("region=") for n in f.names) else "No" for f in fits]
    lines.append("Year FE".ljust(stub) + "".join(v.rjust(width) for v in fe_year))
    lines.append("Region FE".ljust(stub) + "".join(v.rjust(width) for v in fe_region))
    lines.append("Observations".ljust(stub) + "".join(f"{f.n_obs:,}".rjust(width) for f in fits))
    r2_label = "Pseudo R2" if all(f.r2_kind == "McFadden" for f in fits) else "(Pseudo) R2"
    lines.append(r2_label.ljust(stub) + "".join(f"{f.pseudo_r2:.{digits}f}".rjust(width) for f in fits))
    lines.append("Log likelihood".ljust(stub) + "".join(f"{f.loglik:.{digits}f}".rjust(width) for f in fits))
    lines.append("Mean VIF".ljust(stub) + "".join(f"{f.mean_vif:.2f}".rjust(width) for f in fits))
    lines.append("=" * len(rule))
    lines.append("Cluster-robust standard errors (by product) in parentheses.")
    if show_stars:
        lines.append("*** p<0.01, ** p<0.05, * p<0.1")
    return "\n".join(lines) + "\n"
