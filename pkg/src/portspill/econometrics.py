"""Binary-response models with two-way dummies and product-clustered errors.

Probit and logit are fitted by Fisher scoring with step-halving, the linear
probability model by least squares. Standard errors come from the cluster
sandwich ``c * B (sum_g s_g s_g') B`` with ``c = G / (G - 1)``.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Literal, NamedTuple

import numpy as np
import pandas as pd
from scipy import linalg, special, stats

from .errors import (
    MissingCovariate,
    NotConverged,
    PerfectSeparation,
    SingularDesign,
    UnknownCoefficient,
)

log = logging.getLogger(__name__)

__all__ = [
    "ModelSpec",
    "ModelFit",
    "Design",
    "build_design",
    "loglik",
    "score",
    "fit",
    "fit_design",
    "link_inverse",
    "predict_jump_probability",
    "compare_coefficients",
    "mean_uncentered_vif",
    "cluster_sandwich",
]

Family = Literal["probit", "logit", "lpm"]

TOL_LOGLIK = 1e-8
TOL_SCORE = 1e-6
MAX_ITER = 100
POLISH_AT = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    family: Family = "probit"
    response: str = "S"
    regressors: tuple[str, ...] = ("omega", "k", "TRM", "PCI")
    dummies: tuple[str, ...] = ("year", "region")
    cluster: str = "product"
    bread: Literal["observed", "expected"] = "observed"

    def __post_init__(self):
        if self.family not in ("probit", "logit", "lpm"):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.regressors:
            raise ValueError("regressors must be non-empty")
        object.__setattr__(self, "regressors", tuple(self.regressors))
        object.__setattr__(self, "dummies", tuple(self.dummies))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    clusters: np.ndarray  # integer cluster codes
    dropped: list[str]
    n_regressors: int  # const + regressors; dummies follow


def _sorted_levels(values: pd.Series) -> list:
    return sorted(values.unique().tolist(), key=lambda v: (str(type(v)), v))


def build_design(frame: pd.DataFrame, spec: ModelSpec) -> Design:
    """Assemble ``[const, regressors..., dummies...]``.

    For probit/logit, any dummy level whose rows all share one outcome is
    removed with its rows (the level predicts the outcome perfectly); the
    removal repeats until no such level is left. The first remaining level
    of each dummy (sorted) is the reference.
    """
    needed = [spec.response, *spec.regressors, *spec.dummies, spec.cluster]
    for col in needed:
        if col not in frame.columns:
            raise MissingCovariate(col)
    data = frame[needed]
    numeric = [spec.response, *spec.regressors]
    if data[numeric].isna().any().any():
        raise ValueError("table is not complete-case for the model columns")
    y = data[spec.response].to_numpy(dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError(f"response {spec.response!r} is not binary")
    dropped: list[str] = []
    keep = np.ones(len(data), dtype=bool)
    if spec.family != "lpm":
        changed = True
        while changed:
            changed = False
            for dummy in spec.dummies:
                sub = data[keep]
                means = sub.groupby(dummy, sort=True)[spec.response].mean()
                for level, mu in means.items():
                    if mu in (0.0, 1.0):
                        log.warning("%s=%s predicts %s perfectly; dropping its rows", dummy, level, spec.response)
                        dropped.append(f"{dummy}={level}")
                        keep &= (data[dummy] != level).to_numpy()
                        changed = True
        y = y[keep]
        if y.size == 0 or y.min() == y.max():
            raise PerfectSeparation(spec.response)
    data = data[keep]
    cols = [np.ones(len(data))]
    names = ["const"]
    for r in spec.regressors:
        cols.append(data[r].to_numpy(dtype=np.float64))
        names.append(r)
    n_reg = len(names)
    for dummy in spec.dummies:
        levels = _sorted_levels(data[dummy])
        values = data[dummy].to_numpy()
        for level in levels[1:]:
            cols.append((values == level).astype(np.float64))
            names.append(f"{dummy}={level}")
    X = np.column_stack(cols)
    X, names, collinear = _drop_collinear_dummies(X, names, n_reg)
    dropped += collinear
    _, codes = np.unique(data[spec.cluster].astype(str).to_numpy(), return_inverse=True)
    return Design(X, y, names, codes, dropped, n_reg)


def _drop_collinear_dummies(X: np.ndarray, names: list[str], n_reg: int):
    k = X.shape[1]
    if np.linalg.matrix_rank(X) == k:
        return X, names, []
    # greedy left-to-right: keep a column only if it adds rank
    keep: list[int] = []
    bad: list[str] = []
    for j in range(k):
        trial = keep + [j]
        if np.linalg.matrix_rank(X[:, trial]) == len(trial):
            keep = trial
        elif j < n_reg:
            bad.append(names[j])
        else:
            log.warning("dropping collinear dummy %s", names[j])
    if bad:
        raise SingularDesign(bad)
    dropped = [f"collinear:{names[j]}" for j in range(k) if j not in keep]
    return X[:, keep], [names[j] for j in keep], dropped


def link_inverse(family: str, index):
    index = np.asarray(index, dtype=np.float64)
    if family == "probit":
        return special.ndtr(index)
    if family == "logit":
        return special.expit(index)
    if family == "lpm":
        return index
    raise ValueError(f"unknown family {family!r}")


def _d_eta(family: str, y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-observation derivative of the log-likelihood w.r.t. the index."""
    if family == "probit":
        q = 2.0 * y - 1.0
        z = q * eta
        # phi(z) / Phi(z) in log space to stay finite in the tails
        mills = np.exp(-0.5 * z * z - 0.5 * math.log(2 * math.pi) - special.log_ndtr(z))
        return q * mills
    return y - special.expit(eta)


def loglik(family: str, X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    if family == "probit":
        return float(np.sum(special.log_ndtr((2.0 * y - 1.0) * eta)))
    if family == "logit":
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    raise ValueError(f"no likelihood for family {family!r}")


def score(family: str, X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return X.T @ _d_eta(family, y, X @ beta)


def _information(family: str, X: np.ndarray, y: np.ndarray, beta: np.ndarray, kind: str) -> np.ndarray:
    """Negative Hessian (observed) or Fisher information (expected)."""
    eta = X @ beta
    if family == "logit":
        p = special.expit(eta)
        w = p * (1.0 - p)
    elif kind == "expected":
        log_pdf = -0.5 * eta * eta - 0.5 * math.log(2 * math.pi)
        w = np.exp(2 * log_pdf - special.log_ndtr(eta) - special.log_ndtr(-eta))
    else:
        lam = _d_eta(family, y, eta)
        w = lam * (lam + eta)
    return (X * w[:, None]).T @ X


def _newton(family: str, X: np.ndarray, y: np.ndarray, max_iter: int = MAX_ITER):
    k = X.shape[1]
    beta = np.zeros(k)
    ybar = y.mean()
    beta[0] = special.ndtri(ybar) if family == "probit" else special.logit(ybar)
    ll = loglik(family, X, y, beta)
    path = [ll]
    polish = False
    for it in range(1, max_iter + 1):
        g = score(family, X, y, beta)
        # Fisher scoring globally; exact Newton once close, where scoring is only linear
        info = _information(family, X, y, beta, "observed" if polish else "expected")
        try:
            step = linalg.solve(info, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SingularDesign(["information matrix not positive definite"]) from None
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new = loglik(family, X, y, cand)
            if ll_new >= ll:
                break
            t *= 0.5
        else:
            # no ascent left at machine precision: we are at the optimum
            cand, ll_new = beta, ll
        delta = ll_new - ll
        beta, ll = cand, ll_new
        path.append(ll)
        polish = polish or abs(delta) < POLISH_AT
        g = score(family, X, y, beta)
        if abs(delta) < TOL_LOGLIK and np.max(np.abs(g)) < TOL_SCORE:
            return beta, ll, it, path, True
    return beta, ll, max_iter, path, False


def cluster_sandwich(bread: np.ndarray, scores: np.ndarray, clusters: np.ndarray) -> np.ndarray:
    """``G/(G-1) * B M B`` with ``M`` the outer product of cluster-summed scores."""
    n_groups = int(clusters.max()) + 1
    sums = np.zeros((n_groups, scores.shape[1]))
    np.add.at(sums, clusters, scores)
    meat = sums.T @ sums
    cov = bread @ meat @ bread
    cov = (cov + cov.T) / 2.0
    return cov * (n_groups / (n_groups - 1.0))


def mean_uncentered_vif(X: np.ndarray) -> float:
    """Mean over columns of ``x_j'x_j * [(X'X)^-1]_jj``.

    That product equals ``1 / (1 - R2_j)`` where ``R2_j`` is the uncentered
    R-squared of column ``j`` regressed on all the others.
    """
    xtx = X.T @ X
    inv = linalg.inv(xtx)
    return float(np.mean(np.diag(xtx) * np.diag(inv)))


@dataclass
class ModelFit:
    family: str
    names: list[str]
    params: np.ndarray
    cov: np.ndarray
    loglik: float
    loglik_null: float
    pseudo_r2: float
    n_obs: int
    n_clusters: int
    mean_vif: float
    converged: bool
    iterations: int
    dropped_dummies: list[str] = field(default_factory=list)
    loglik_path: list[float] = field(default_factory=list)
    r2_kind: str = "McFadden"  # "R2" for the linear probability model
    stat_kind: str = "z"
    df_resid: int | None = None
    spec: ModelSpec | None = None
    label: str = ""

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def stat(self) -> np.ndarray:
        return self.params / self.se

    @property
    def pvalues(self) -> np.ndarray:
        a = np.abs(self.stat)
        if self.stat_kind == "t":
            return 2.0 * stats.t.sf(a, self.df_resid)
        return 2.0 * stats.norm.sf(a)

    @property
    def coefficients(self) -> dict[str, tuple[float, float, float, float]]:
        return {
            n: (float(b), float(s), float(z), float(p))
            for n, b, s, z, p in zip(self.names, self.params, self.se, self.stat, self.pvalues)
        }

    def coef(self, name: str) -> tuple[float, float]:
        try:
            j = self.names.index(name)
        except ValueError:
            raise UnknownCoefficient(name) from None
        return float(self.params[j]), float(self.se[j])

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        b, s = self.coef(name)
        if self.stat_kind == "t":
            q = stats.t.ppf(0.5 + level / 2, self.df_resid)
        else:
            q = stats.norm.ppf(0.5 + level / 2)
        return b - q * s, b + q * s

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "family": self.family,
            "spec": asdict(self.spec) if self.spec else None,
            "names": list(self.names),
            "params": [float(v) for v in self.params],
            "cov": [[float(v) for v in row] for row in self.cov],
            "se": [float(v) for v in self.se],
            "pvalues": [float(v) for v in self.pvalues],
            "loglik": self.loglik,
            "loglik_null": self.loglik_null,
            "pseudo_r2": self.pseudo_r2,
            "r2_kind": self.r2_kind,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "mean_vif": self.mean_vif,
            "converged": self.converged,
            "iterations": self.iterations,
            "dropped_dummies": list(self.dropped_dummies),
            "loglik_path": list(self.loglik_path),
            "stat_kind": self.stat_kind,
            "df_resid": self.df_resid,
        }

    def to_json(self) -> str:
        # json writes floats with repr, i.e. full round-trip precision
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelFit":
        spec = ModelSpec.from_dict(doc["spec"]) if doc.get("spec") else None
        return cls(
            family=doc["family"],
            names=list(doc["names"]),
            params=np.array(doc["params"], dtype=np.float64),
            cov=np.array(doc["cov"], dtype=np.float64),
            loglik=doc["loglik"],
            loglik_null=doc["loglik_null"],
            pseudo_r2=doc["pseudo_r2"],
            n_obs=doc["n_obs"],
            n_clusters=doc["n_clusters"],
            mean_vif=doc["mean_vif"],
            converged=doc["converged"],
            iterations=doc["iterations"],
            dropped_dummies=list(doc.get("dropped_dummies", [])),
            loglik_path=list(doc.get("loglik_path", [])),
            r2_kind=doc.get("r2_kind", "McFadden"),
            stat_kind=doc.get("stat_kind", "z"),
            df_resid=doc.get("df_resid"),
            spec=spec,
            label=doc.get("label", ""),
        )


def fit_design(design: Design, family: str, bread: str = "observed", spec: ModelSpec | None = None) -> ModelFit:
    X, y = design.X, design.y
    n = len(y)
    n_groups = int(design.clusters.max()) + 1
    if n_groups < 2:
        raise ValueError("cluster-robust inference needs at least two clusters")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesign(design.names)
    vif = mean_uncentered_vif(X)
    if family == "lpm":
        beta, *_ = linalg.lstsq(X, y)
        resid = y - X @ beta
        bread_m = linalg.inv(X.T @ X)
        cov = cluster_sandwich(bread_m, X * resid[:, None], design.clusters)
        rss = float(resid @ resid)
        tss = float(((y - y.mean()) ** 2).sum())
        sigma2 = rss / n
        ll = -0.5 * n * (math.log(2 * math.pi * sigma2) + 1.0)
        ll0 = -0.5 * n * (math.log(2 * math.pi * tss / n) + 1.0)
        return ModelFit(
            family, list(design.names), beta, cov, ll, ll0, 1.0 - rss / tss, n, n_groups, vif, True, 1,
            list(design.dropped), [ll], "R2", "t", n_groups - 1, spec,
        )  # fmt: skip
    beta, ll, iters, path, ok = _newton(family, X, y)
    if not ok:
        raise NotConverged(iters, ll)
    info = _information(family, X, y, beta, bread)
    bread_m = linalg.inv(info)
    scores = X * _d_eta(family, y, X @ beta)[:, None]
    cov = cluster_sandwich(bread_m, scores, design.clusters)
    ybar = y.mean()
    ll0 = n * (ybar * math.log(ybar) + (1 - ybar) * math.log(1 - ybar))
    return ModelFit(
        family, list(design.names), beta, cov, ll, ll0, 1.0 - ll / ll0, n, n_groups, vif, True, iters,
        list(design.dropped), path, "McFadden", "z", None, spec,
    )  # fmt: skip


def fit(table, spec: ModelSpec) -> ModelFit:
    """Fit ``spec`` on an :class:`~portspill.outcomes.EstimationTable` or DataFrame."""
    frame = table.frame if hasattr(table, "frame") else table
    design = build_design(frame, spec)
    return fit_design(design, spec.family, spec.bread, spec)


class Prediction(NamedTuple):
    probability: float
    clipped: bool


def predict_jump_probability(fit_: ModelFit, row: Mapping) -> Prediction:
    """Link-inverse of the fitted index at one covariate row.

    ``row`` supplies each regressor by name and each dummy variable's level
    (e.g. ``{"omega": 0.3, ..., "year": 2010, "region": "RBUS"}``). A level
    without a coefficient is the reference level.
    """
    index = 0.0
    dummy_vars = {n.split("=", 1)[0] for n in fit_.names if "=" in n}
    if fit_.spec is not None:
        dummy_vars |= set(fit_.spec.dummies)
    for var in sorted(dummy_vars):
        if var not in row:
            raise MissingCovariate(var)
    for name, b in zip(fit_.names, fit_.params):
        if name == "const":
            index += b
        elif "=" in name:
            var, level = name.split("=", 1)
            if str(row[var]) == level:
                index += b
        else:
            if name not in row:
                raise MissingCovariate(name)
            index += b * float(row[name])
    p = float(link_inverse(fit_.family, index))
    if fit_.family == "lpm":
        clipped = min(max(p, 0.0), 1.0)
        return Prediction(clipped, clipped != p)
    return Prediction(p, False)


def wald_difference(b_a: float, se_a: float, b_b: float, se_b: float) -> tuple[float, float]:
    chi2 = (b_a - b_b) ** 2 / (se_a**2 + se_b**2)
    return chi2, float(stats.chi2.sf(chi2, 1))


def compare_coefficients(fit_a: ModelFit, fit_b: ModelFit, name: str) -> tuple[float, float]:
    """Chi-square(1) test that ``name`` is equal across two independent fits."""
    b_a, se_a = fit_a.coef(name)
    b_b, se_b = fit_b.coef(name)
    return wald_difference(b_a, se_a, b_b, se_b)
