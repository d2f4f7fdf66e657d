"""Command-line front end.

Each subcommand runs one pipeline stage inside an output directory::

    ingest -> rca -> proximity -> density -> jumps -> match -> regress -> report

Stages read their upstream artifacts from disk and record what they consumed
and produced in ``manifest.json`` (sha256 digests of inputs, config and
artifacts plus the tool version). A stage whose inputs, config and artifacts
all still match the manifest is skipped, so reruns are no-ops. ``run`` chains
every stage; ``generate`` writes a synthetic dataset with a ready config.

Exit status: 0 success, 1 domain error, 2 configuration or usage error.
"""

from __future__ import annotations

import os

# deterministic numerics: keep BLAS single-threaded unless told otherwise
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import copy
import datetime as dt
import hashlib
import json
import logging
import sys
from collections.abc import Callable, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .errors import ConfigError, MissingUpstreamArtifact, PortSpillError

log = logging.getLogger("portspill")

ENV_PREFIX = "PORTSPILL_"
STAGES = ("ingest", "rca", "proximity", "density", "jumps", "match", "regress", "report")
UPSTREAM = {
    "ingest": (),
    "rca": ("ingest",),
    "proximity": ("ingest", "rca"),
    "density": ("ingest", "rca", "proximity"),
    "jumps": ("ingest", "rca"),
    "match": ("ingest", "rca", "density", "jumps"),
    "regress": ("match",),
    "report": ("ingest", "proximity", "regress"),
}
MANIFEST = "manifest.json"
LOCK = ".portspill.lock"

MATCHED_REGRESSORS = ["omega", "Omega", "k", "K", "PCI", "TRM"]
MODEL_DEFAULTS = {
    "name": None,
    "table": "matched",
    "family": "probit",
    "regressors": MATCHED_REGRESSORS,
    "dummies": ["year", "region"],
    "cluster": "product",
    "bread": "observed",
    "split": None,
}
DEFAULT_MODELS = [
    {"name": "region", "table": "region", "regressors": ["omega", "k", "PCI", "TRM"]},
    {"name": "matched"},
    {"name": "matched_logit", "family": "logit"},
    {"name": "matched_lpm", "family": "lpm"},
    {"name": "by_pci", "split": "pci-mean"},
    {"name": "by_leamer", "split": "leamer-groups"},
    {"name": "by_period", "split": "periods"},
]
DEFAULT_PIPELINE = {
    "proximity_window": None,  # pooled over the panel's full span
    "boundary_policy": "truncate",
    "edge_threshold": 0.55,
    "periods": {"crisis": [2007, 2009], "recovery": [2010, 2013], "post-crisis": [2014, 2018]},
}
DEFAULTS = {
    "inputs": {
        "region_file": None,
        "port_file": None,
        "pci_file": None,
        "pci_code_column": "hs2002",
        "concordance_file": None,  # without one the PCI file is already keyed by HS2017
        "continent_file": None,
        "product_registry": None,
        "port_region_map": None,  # None: the bundled reference table
        "region_schema": {},
        "port_schema": {},
    },
    "pipeline": DEFAULT_PIPELINE,
    "models": DEFAULT_MODELS,
    "report": {"style": "paper", "digits": 3},
    "output_dir": "out",
    "threads": 1,
    "synthetic": None,
}
FREE_FORM = {("pipeline", "periods"), ("inputs", "region_schema"), ("inputs", "port_schema"), ("synthetic",)}
STAGE_CONFIG = {
    "ingest": ("inputs",),
    "rca": ("pipeline.proximity_window",),
    "proximity": ("pipeline.proximity_window",),
    "density": (),
    "jumps": ("pipeline.boundary_policy",),
    "match": ("pipeline.periods",),
    "regress": ("models", "pipeline.periods"),
    "report": ("report", "pipeline.edge_threshold", "pipeline.proximity_window"),
}


# --------------------------------------------------------------------------- config


def _merge(base: dict, override: Mapping, path: tuple[str, ...] = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = (*path, key)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[key], dict) and here not in FREE_FORM:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {'.'.join(here)!r} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _env_overrides(environ: Mapping[str, str]) -> dict:
    """``PORTSPILL_PIPELINE__BOUNDARY_POLICY=strict-skip`` style overrides."""
    out: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = name[len(ENV_PREFIX) :].lower().split("__")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = yaml.safe_load(environ[name])
    return out


def _normalize_models(models) -> list[dict]:
    if not isinstance(models, list) or not models:
        raise ConfigError("models must be a non-empty list")
    out, seen = [], set()
    for n, doc in enumerate(models):
        if not isinstance(doc, Mapping):
            raise ConfigError(f"models[{n}] must be a mapping")
        unknown = set(doc) - set(MODEL_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in models[{n}]")
        model = {**copy.deepcopy(MODEL_DEFAULTS), **copy.deepcopy(dict(doc))}
        if not model["name"]:
            raise ConfigError(f"models[{n}] needs a name")
        if model["name"] in seen:
            raise ConfigError(f"duplicate model name {model['name']!r}")
        seen.add(model["name"])
        if model["table"] not in ("region", "matched"):
            raise ConfigError(f"model {model['name']!r}: table must be 'region' or 'matched'")
        if model["family"] not in ("probit", "logit", "lpm"):
            raise ConfigError(f"model {model['name']!r}: unknown family {model['family']!r}")
        if model["bread"] not in ("observed", "expected"):
            raise ConfigError(f"model {model['name']!r}: bread must be 'observed' or 'expected'")
        if model["split"] not in (None, "pci-mean", "leamer-groups", "periods"):
            raise ConfigError(f"model {model['name']!r}: unknown split {model['split']!r}")
        model["regressors"] = list(model["regressors"])
        model["dummies"] = list(model["dummies"])
        out.append(model)
    return out


def _validate(doc: dict) -> dict:
    from .outcomes import BOUNDARY_POLICIES

    pipe = doc["pipeline"]
    if pipe["boundary_policy"] not in BOUNDARY_POLICIES:
        raise ConfigError(f"pipeline.boundary_policy must be one of {BOUNDARY_POLICIES}")
    try:
        threshold = float(pipe["edge_threshold"])
    except (TypeError, ValueError):
        raise ConfigError("pipeline.edge_threshold must be a number") from None
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("pipeline.edge_threshold must lie in [0, 1]")
    window = pipe["proximity_window"]
    if window is not None:
        if not (isinstance(window, (list, tuple)) and len(window) == 2 and all(isinstance(v, int) for v in window)):
            raise ConfigError("pipeline.proximity_window must be null or [first_year, last_year]")
        if window[0] > window[1]:
            raise ConfigError("pipeline.proximity_window is reversed")
    for name, span in pipe["periods"].items():
        if not (isinstance(span, (list, tuple)) and len(span) == 2):
            raise ConfigError(f"pipeline.periods.{name} must be [first_year, last_year]")
    doc["models"] = _normalize_models(doc["models"])
    if doc["report"]["style"] not in ("paper", "plain"):
        raise ConfigError("report.style must be 'paper' or 'plain'")
    if not isinstance(doc["threads"], int) or doc["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    return doc


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration plus the directory relative paths resolve against."""

    doc: dict
    base_dir: Path

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.doc["output_dir"])

    def resolve(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def input_path(self, key: str) -> Path | None:
        return self.resolve(self.doc["inputs"][key])

    def digest(self, keys: Sequence[str]) -> str:
        subset = {}
        for key in keys:
            node = self.doc
            for part in key.split("."):
                node = node[part]
            subset[key] = node
        return _sha256_bytes(json.dumps(subset, sort_keys=True, default=str).encode())


def load_config(
    path: str | Path | None = None,
    *,
    environ: Mapping[str, str] | None = None,
    paper_defaults: bool = False,
    seed: int | None = None,
    threads: int | None = None,
) -> RunConfig:
    """Defaults, then the YAML file, then environment overrides, then flags.

    ``paper_defaults`` finally pins the pipeline options and model list to the
    defaults, whatever the file or environment say.
    """
    doc = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"config {path} must hold a mapping")
        doc = _merge(doc, loaded)
        base = path.resolve().parent
    doc = _merge(doc, _env_overrides(os.environ if environ is None else environ))
    if seed is not None:
        doc["synthetic"] = {**(doc["synthetic"] or {}), "seed": seed}
    if threads is not None:
        doc["threads"] = threads
    if paper_defaults:
        doc["pipeline"] = copy.deepcopy(DEFAULT_PIPELINE)
        doc["models"] = copy.deepcopy(DEFAULT_MODELS)
    return RunConfig(_validate(doc), base)


# --------------------------------------------------------------------------- manifest


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, root: Path, doc: dict | None = None):
        self.root = root
        self.doc = doc or {"tool": "portspill", "version": __version__, "stages": {}}

    @classmethod
    def load(cls, root: Path) -> "Manifest":
        path = root / MANIFEST
        if not path.exists():
            return cls(root)
        try:
            return cls(root, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise PortSpillError(f"corrupt manifest {path}: {exc}") from None

    def save(self) -> None:
        self.doc["version"] = __version__
        tmp = self.root / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(self.root / MANIFEST)

    def stage(self, name: str) -> dict | None:
        return self.doc["stages"].get(name)

    def artifacts_intact(self, name: str) -> bool:
        entry = self.stage(name)
        if entry is None:
            return False
        for rel, digest in entry["artifacts"].items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def record(self, name: str, config_digest: str, inputs: dict[str, str], artifacts: Sequence[Path]) -> None:
        self.doc["stages"][name] = {
            "tool_version": __version__,
            "config_digest": config_digest,
            "inputs": dict(sorted(inputs.items())),
            "artifacts": {p.relative_to(self.root).as_posix(): sha256_file(p) for p in sorted(artifacts)},
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        }


@contextmanager
def output_lock(root: Path):
    """Exclusive ownership of an output directory for one invocation."""
    root.mkdir(parents=True, exist_ok=True)
    path = root / LOCK
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid > 0 and _alive(pid):
                raise PortSpillError(f"output directory {root} is locked by process {pid}") from None
            path.unlink(missing_ok=True)  # stale lock from a dead process
    else:
        raise PortSpillError(f"cannot lock output directory {root}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# --------------------------------------------------------------------------- stage context


class Context:
    """Lazy loaders for artifacts shared between stages of one invocation."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self._cache: dict = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def path(self, rel: str) -> Path:
        return self.out / rel

    def products(self):
        from .ingest import load_product_registry

        return self._memo("products", lambda: load_product_registry(self.path("ingest/products.csv")))

    def product_codes(self) -> tuple[str, ...]:
        return tuple(p.hs4 for p in self.products())

    def leamer(self) -> dict[str, int | None]:
        return {p.hs4: p.leamer for p in self.products()}

    def panel(self, kind: str):
        from .ingest import load_export_csv

        name = "regions.csv" if kind == "region" else "ports.csv"
        return self._memo(
            ("panel", kind), lambda: load_export_csv(self.path(f"ingest/{name}"), kind, products=self.product_codes())
        )

    def port_map(self):
        from .model import PortRegionMap

        return self._memo("port_map", lambda: PortRegionMap.read_csv(self.path("ingest/port_regions.csv")))

    def continents(self):
        from .ingest import load_continent_map

        p = self.path("ingest/continents.csv")
        return self._memo("continents", lambda: load_continent_map(p) if p.exists() else None)

    def pci(self):
        from .ingest import load_pci_csv

        return self._memo("pci", lambda: load_pci_csv(self.path("ingest/pci.csv"), code_column="hs2017"))

    def window(self, kind: str) -> tuple[int, int]:
        w = self.cfg.doc["pipeline"]["proximity_window"]
        years = self.panel(kind).years
        return (int(w[0]), int(w[1])) if w is not None else (years[0], years[-1])

    def cube(self, kind: str, pooled: bool = False):
        from .complexity import AdvantageCube

        def read():
            panel = self.panel(kind)
            suffix = "_pooled" if pooled else ""
            path = self.path(f"rca/{kind}_rca{suffix}.csv")
            if pooled:
                w = self.window(kind)
                return AdvantageCube.read_csv(path, kind, panel.locations, panel.products, (w[0],), w)
            return AdvantageCube.read_csv(path, kind, panel.locations, panel.products, panel.years)

        return self._memo(("cube", kind, pooled), read)

    def proximity(self, kind: str):
        from .complexity import ProximityMatrix

        name = "phi" if kind == "region" else "Phi"
        return self._memo(
            ("prox", kind),
            lambda: ProximityMatrix.read_csv(self.path(f"proximity/{name}.csv"), kind, self.window(kind)),
        )

    def density(self, kind: str):
        from .complexity import RelatednessPanel

        name = "omega" if kind == "region" else "Omega"
        return self._memo(("dens", kind), lambda: RelatednessPanel.read_csv(self.path(f"density/{name}.csv"), kind))

    def table(self, which: str):
        from .outcomes import EstimationTable

        return self._memo(
            ("table", which), lambda: EstimationTable.read_csv(self.path(f"tables/{which}_table.csv"), which == "matched")
        )


# --------------------------------------------------------------------------- stages


def _stage_ingest(ctx: Context) -> list[Path]:
    from .ingest import (
        convert_pci,
        load_concordance,
        load_continent_map,
        load_export_csv,
        load_pci_csv,
        load_product_registry,
        write_continent_map,
        write_export_csv,
        write_pci_csv,
        write_product_registry,
    )
    from .ingest import Schema
    from .model import Kind, PortRegionMap, ProductCode, load_reference_port_map, validate_panel

    cfg, inp = ctx.cfg, ctx.cfg.doc["inputs"]
    for key in ("region_file", "port_file", "pci_file"):
        if inp[key] is None:
            raise ConfigError(f"inputs.{key} is required")
    try:
        region_schema = Schema.from_mapping(Kind.REGION, inp["region_schema"])
        port_schema = Schema.from_mapping(Kind.PORT, inp["port_schema"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"inputs schema: {exc}") from None
    registry = None
    if inp["product_registry"]:
        registry = load_product_registry(cfg.input_path("product_registry"))
    codes = [p.hs4 for p in registry] if registry is not None else None
    port_map = (
        PortRegionMap.read_csv(cfg.input_path("port_region_map")) if inp["port_region_map"] else load_reference_port_map()
    )
    region = load_export_csv(
        cfg.input_path("region_file"), Kind.REGION, region_schema, products=codes, via_codes=port_map.ports
    )
    port = load_export_csv(cfg.input_path("port_file"), Kind.PORT, port_schema, products=codes)
    if registry is None:
        universe = sorted(set(region.products) | set(port.products))
        region, port = region.with_products(universe), port.with_products(universe)
        registry = [ProductCode.from_hs4(c) for c in universe]
    continents = load_continent_map(cfg.input_path("continent_file")) if inp["continent_file"] else None
    pci = load_pci_csv(cfg.input_path("pci_file"), code_column=inp["pci_code_column"])
    if inp["concordance_file"]:
        pci = convert_pci(pci, load_concordance(cfg.input_path("concordance_file")))

    out = ctx.path("ingest")
    out.mkdir(parents=True, exist_ok=True)
    issues = [
        {"panel": name, "rule": v.rule, "detail": v.detail}
        for name, panel, via in (("region", region, port_map.ports), ("port", port, None))
        for v in validate_panel(panel, known_via=via)
    ]
    (out / "validation.json").write_text(json.dumps(issues, indent=1) + "\n", encoding="utf-8")
    if issues:
        raise PortSpillError(f"{len(issues)} validation issue(s); see {out / 'validation.json'}")
    write_export_csv(region, out / "regions.csv")
    write_export_csv(port, out / "ports.csv")
    write_pci_csv(pci, out / "pci.csv", code_column="hs2017")
    write_product_registry(registry, out / "products.csv")
    port_map.write_csv(out / "port_regions.csv")
    written = [out / n for n in ("validation.json", "regions.csv", "ports.csv", "pci.csv", "products.csv", "port_regions.csv")]
    if continents is not None:
        write_continent_map(continents, out / "continents.csv")
        written.append(out / "continents.csv")
    return written


def _stage_rca(ctx: Context) -> list[Path]:
    from .complexity import compute_rca

    out = ctx.path("rca")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind in ("region", "port"):
        panel = ctx.panel(kind)
        cube = compute_rca(panel, "per-year")
        pooled = compute_rca(panel, "pooled-window", ctx.window(kind))
        cube.write_csv(out / f"{kind}_rca.csv")
        cube.write_ubiquity_csv(out / f"{kind}_ubiquity.csv")
        pooled.write_csv(out / f"{kind}_rca_pooled.csv")
        written += [out / f"{kind}_rca.csv", out / f"{kind}_ubiquity.csv", out / f"{kind}_rca_pooled.csv"]
    return written


def _stage_proximity(ctx: Context) -> list[Path]:
    from .complexity import compute_proximity

    out = ctx.path("proximity")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, name in (("region", "phi"), ("port", "Phi")):
        compute_proximity(ctx.cube(kind, pooled=True)).write_csv(out / f"{name}.csv")
        written.append(out / f"{name}.csv")
    return written


def _stage_density(ctx: Context) -> list[Path]:
    from .complexity import compute_density

    out = ctx.path("density")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, name in (("region", "omega"), ("port", "Omega")):
        compute_density(ctx.cube(kind), ctx.proximity(kind)).write_csv(out / f"{name}.csv")
        written.append(out / f"{name}.csv")
    return written


def _stage_jumps(ctx: Context) -> list[Path]:
    from .outcomes import detect_jumps

    out = ctx.path("jumps")
    out.mkdir(parents=True, exist_ok=True)
    detect_jumps(ctx.cube("region"), ctx.cfg.doc["pipeline"]["boundary_policy"]).write_csv(out / "jumps.csv")
    return [out / "jumps.csv"]


def _periods(cfg: RunConfig) -> dict[str, tuple[int, int]]:
    return {k: (int(v[0]), int(v[1])) for k, v in cfg.doc["pipeline"]["periods"].items()}


def _stage_match(ctx: Context) -> list[Path]:
    from .complexity import compute_des, compute_trm
    from .outcomes import build_matched_table, build_region_table, read_jumps_csv

    region = ctx.panel("region")
    cube = ctx.cube("region")
    jumps = read_jumps_csv(
        ctx.path("jumps/jumps.csv"), cube.locations, cube.products, cube.years, ctx.cfg.doc["pipeline"]["boundary_policy"]
    )
    trm = compute_trm(region) if region.routing is not None else {}
    rtab = build_region_table(jumps, ctx.density("region"), cube, ctx.pci(), trm, ctx.leamer(), _periods(ctx.cfg))
    port = ctx.panel("port")
    continents = ctx.continents()
    des = compute_des(port, continents) if continents is not None and port.routing is not None else None
    mtab = build_matched_table(rtab, ctx.density("port"), ctx.cube("port"), ctx.port_map(), port, des)
    out = ctx.path("tables")
    out.mkdir(parents=True, exist_ok=True)
    rtab.write_csv(out / "region_table.csv")
    rtab.write_drop_report(out / "region_drops.json")
    mtab.write_csv(out / "matched_table.csv")
    mtab.write_drop_report(out / "matched_drops.json")
    return [out / n for n in ("region_table.csv", "region_drops.json", "matched_table.csv", "matched_drops.json")]


def _fit_job(args):
    from .econometrics import ModelSpec, fit

    frame, spec_doc, label = args
    result = fit(frame, ModelSpec.from_dict(spec_doc))
    result.label = label
    return result


def _stage_regress(ctx: Context) -> list[Path]:
    from .econometrics import compare_coefficients
    from .outcomes import split_sample

    jobs, groups_of = [], {}
    for model in ctx.cfg.doc["models"]:
        spec_doc = {k: model[k] for k in ("family", "regressors", "dummies", "cluster", "bread")}
        table = ctx.table(model["table"])
        if model["split"] is None:
            jobs.append((table.frame, spec_doc, model["name"]))
            continue
        parts = split_sample(table, model["split"], _periods(ctx.cfg))
        groups_of[model["name"]] = []
        for group, sub in parts.items():
            label = f"{model['name']}[{group}]"
            if len(sub) == 0:
                log.warning("%s: empty sub-sample, skipped", label)
                continue
            groups_of[model["name"]].append(label)
            jobs.append((sub.frame, spec_doc, label))
    threads = ctx.cfg.doc["threads"]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(_fit_job, jobs))
    else:
        fits = [_fit_job(j) for j in jobs]
    by_label = {f.label: f for f in fits}
    out = ctx.path("fits")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in fits:
        path = out / f"{_slug(f.label)}.json"
        path.write_text(f.to_json() + "\n", encoding="utf-8")
        written.append(path)
    comparisons = []
    for name, labels in groups_of.items():
        for i, a in enumerate(labels):
            for b in labels[i + 1 :]:
                for coef in ("omega", "Omega"):
                    if coef in by_label[a].names and coef in by_label[b].names:
                        chi2, p = compare_coefficients(by_label[a], by_label[b], coef)
                        comparisons.append({"model": name, "a": a, "b": b, "coefficient": coef, "chi2": chi2, "p": p})
    index = {"fits": [f.label for f in fits], "files": [p.name for p in written], "splits": groups_of}
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    (out / "comparisons.json").write_text(json.dumps(comparisons, indent=1) + "\n", encoding="utf-8")
    return [*written, out / "index.json", out / "comparisons.json"]


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label).strip("_")


def _stage_report(ctx: Context) -> list[Path]:
    import pandas as pd

    from .complexity import build_product_space
    from .econometrics import ModelFit
    from .report import format_table, table_frame

    fits_dir = ctx.path("fits")
    index = json.loads((fits_dir / "index.json").read_text(encoding="utf-8"))
    fits = [ModelFit.from_dict(json.loads((fits_dir / f).read_text(encoding="utf-8"))) for f in index["files"]]
    by_label = {f.label: f for f in fits}
    models = {m["name"]: m for m in ctx.cfg.doc["models"]}
    opts = ctx.cfg.doc["report"]
    show_stars = opts["style"] == "paper"
    digits = int(opts["digits"])

    blocks, frames = [], []
    plain = [m for m in models.values() if m["split"] is None]
    for table, title in (("region", "Region-level models"), ("matched", "Region-port matched models")):
        group = [by_label[m["name"]] for m in plain if m["table"] == table]
        if group:
            blocks.append(format_table(group, title=title, digits=digits, show_stars=show_stars))
            frames.append(table_frame(group).assign(table=title))
    for name, labels in index["splits"].items():
        group = [by_label[label] for label in labels]
        title = f"Split sample: {name} ({models[name]['split']})"
        blocks.append(format_table(group, title=title, digits=digits, show_stars=show_stars))
        frames.append(table_frame(group).assign(table=title))
    comparisons = json.loads((fits_dir / "comparisons.json").read_text(encoding="utf-8"))
    if comparisons:
        lines = ["Coefficient equality across split samples (chi-square, 1 df)"]
        for c in comparisons:
            lines.append(f"  {c['coefficient']:<6} {c['a']} vs {c['b']}: chi2 = {c['chi2']:.2f}, p = {c['p']:.4f}")
        blocks.append("\n".join(lines) + "\n")

    out = ctx.path("report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "tables.txt").write_text("\n".join(blocks), encoding="utf-8")
    pd.concat(frames, ignore_index=True).to_csv(out / "tables.csv", index=False, lineterminator="\n")
    pd.DataFrame(comparisons, columns=["model", "a", "b", "coefficient", "chi2", "p"]).to_csv(
        out / "comparisons.csv", index=False, lineterminator="\n"
    )
    written = [out / "tables.txt", out / "tables.csv", out / "comparisons.csv"]
    threshold = float(ctx.cfg.doc["pipeline"]["edge_threshold"])
    for kind, name in (("region", "production"), ("port", "transport")):
        graph = build_product_space(ctx.proximity(kind), ctx.panel(kind), threshold, ctx.leamer())
        graph.write_json(out / f"product_space_{name}.json")
        graph.write_graphml(out / f"product_space_{name}.graphml")
        written += [out / f"product_space_{name}.json", out / f"product_space_{name}.graphml"]
    return written


RUNNERS: dict[str, Callable[[Context], list[Path]]] = {
    "ingest": _stage_ingest,
    "rca": _stage_rca,
    "proximity": _stage_proximity,
    "density": _stage_density,
    "jumps": _stage_jumps,
    "match": _stage_match,
    "regress": _stage_regress,
    "report": _stage_report,
}


def _stage_inputs(stage: str, cfg: RunConfig, manifest: Manifest) -> dict[str, str]:
    inputs: dict[str, str] = {}
    if stage == "ingest":
        for key, value in sorted(cfg.doc["inputs"].items()):
            if key.endswith(("_file", "_registry", "_map")) and value is not None:
                p = cfg.input_path(key)
                if not p.exists():
                    raise ConfigError(f"inputs.{key}: {p} does not exist")
                inputs[f"input:{key}"] = sha256_file(p)
        return inputs
    for up in UPSTREAM[stage]:
        entry = manifest.stage(up)
        if entry is None or not manifest.artifacts_intact(up):
            raise MissingUpstreamArtifact(f"stage {stage!r} needs the artifacts of {up!r}; run `portspill {up}` first")
        inputs.update(entry["artifacts"])
    return inputs


def run_stage(stage: str, cfg: RunConfig) -> bool:
    """Run one stage; returns False when it was already up to date."""
    root = cfg.output_dir
    with output_lock(root):
        manifest = Manifest.load(root)
        inputs = _stage_inputs(stage, cfg, manifest)
        cdigest = cfg.digest(STAGE_CONFIG[stage])
        entry = manifest.stage(stage)
        if (
            entry is not None
            and entry.get("tool_version") == __version__
            and entry.get("config_digest") == cdigest
            and entry.get("inputs") == dict(sorted(inputs.items()))
            and manifest.artifacts_intact(stage)
        ):
            log.info("%s: up to date", stage)
            return False
        written = RUNNERS[stage](Context(cfg))
        manifest.record(stage, cdigest, inputs, written)
        manifest.save()
        log.info("%s: wrote %d artifact(s)", stage, len(written))
        return True


def run_generate(cfg: RunConfig, out_dir: Path) -> bool:
    """Write a synthetic dataset plus its config; a no-op if already current."""
    from .synth import SynthConfig, generate, write_synthetic

    doc = dict(cfg.doc["synthetic"] or {})
    try:
        scfg = SynthConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"synthetic: {exc}") from None
    with output_lock(out_dir):
        manifest = Manifest.load(out_dir)
        cdigest = _sha256_bytes(json.dumps(scfg.to_dict(), sort_keys=True).encode())
        entry = manifest.stage("generate")
        if (
            entry is not None
            and entry.get("tool_version") == __version__
            and entry.get("config_digest") == cdigest
            and manifest.artifacts_intact("generate")
        ):
            log.info("generate: up to date")
            return False
        data = generate(scfg)
        config_path = write_synthetic(data, out_dir)
        written = [out_dir / n for n in _SYNTH_FILES] + [config_path]
        written += _write_truth(data, out_dir)
        manifest.record("generate", cdigest, {}, written)
        manifest.save()
        log.info("generate: wrote %d file(s) to %s", len(written), out_dir)
        return True


_SYNTH_FILES = (
    "regions.csv",
    "ports.csv",
    "pci_hs2002.csv",
    "concordance.csv",
    "continents.csv",
    "products.csv",
    "port_regions.csv",
)


def _write_truth(data, out_dir: Path) -> list[Path]:
    import numpy as np
    import pandas as pd

    t = data.truth
    panel = data.region_panel
    L, P, T = t.omega.shape
    l, p, y = np.meshgrid(np.arange(L), np.arange(P), np.arange(T), indexing="ij")
    region = pd.DataFrame(
        {
            "region": np.asarray(panel.locations, dtype=object)[l.ravel()],
            "product": np.asarray(panel.products, dtype=object)[p.ravel()],
            "year": np.asarray(panel.years)[y.ravel()],
            "m": t.m_region.ravel(),
            "omega": t.omega.ravel(),
            "entry_next_year": t.entry.ravel().astype(np.int8),
            "index": t.index.ravel(),
        }
    )
    port_panel = data.port_panel
    Lp = t.Omega.shape[0]
    l, p, y = np.meshgrid(np.arange(Lp), np.arange(P), np.arange(T), indexing="ij")
    port = pd.DataFrame(
        {
            "port": np.asarray(port_panel.locations, dtype=object)[l.ravel()],
            "product": np.asarray(port_panel.products, dtype=object)[p.ravel()],
            "year": np.asarray(port_panel.years)[y.ravel()],
            "m": t.m_port.ravel(),
            "Omega": t.Omega.ravel(),
        }
    )
    products = pd.DataFrame({"product": list(panel.products), "community": t.community})
    paths = [out_dir / "truth_regions.csv", out_dir / "truth_ports.csv", out_dir / "truth_products.csv"]
    region.to_csv(paths[0], index=False, lineterminator="\n")
    port.to_csv(paths[1], index=False, lineterminator="\n")
    products.to_csv(paths[2], index=False, lineterminator="\n")
    return paths


# --------------------------------------------------------------------------- argparse


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=d, help="seed for the synthetic generator")
    parser.add_argument("--threads", type=int, default=d, help="worker processes for model fits")
    parser.add_argument(
        "--paper-defaults",
        action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="pin pipeline options and models to the reference configuration",
    )
    parser.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portspill", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "ingest": "parse and validate the raw input files",
        "rca": "yearly and pooled revealed comparative advantage",
        "proximity": "production (phi) and transport (Phi) proximity",
        "density": "relatedness density omega and Omega",
        "jumps": "detect jumps under the boundary policy",
        "match": "build the region and region-port estimation tables",
        "regress": "fit every configured model",
        "report": "render tables and product-space graphs",
        "run": "run every stage in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _global_flags(p, suppress=True)
        if name in ("report", "run"):
            p.add_argument("--style", choices=("paper", "plain"), help="table style (default from config)")
    gen = sub.add_parser("generate", help="write a synthetic dataset and its config")
    _global_flags(gen, suppress=True)
    gen.add_argument("out", nargs="?", default=None, help="target directory (default: <output_dir>/synthetic)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s", force=True
    )
    try:
        cfg = load_config(args.config, paper_defaults=args.paper_defaults, seed=args.seed, threads=args.threads)
        if getattr(args, "style", None):
            cfg.doc["report"]["style"] = args.style
        if args.command == "generate":
            out = Path(args.out) if args.out else cfg.output_dir / "synthetic"
            run_generate(cfg, out)
        elif args.command == "run":
            for stage in STAGES:
                run_stage(stage, cfg)
        else:
            run_stage(args.command, cfg)
    except ConfigError as exc:
        print(f"portspill: configuration error: {exc}", file=sys.stderr)
        return 2
    except PortSpillError as exc:
        print(f"portspill: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
