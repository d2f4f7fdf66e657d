"""Monte Carlo recovery of planted spillover coefficients.

Each replication draws a synthetic world with its own seed, runs the full
pipeline on it and refits the matched probit. Replications are independent,
so they may run in worker processes; results are ordered by seed either way.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .econometrics import ModelSpec, fit
from .pipeline import run_pipeline
from .synth import SynthConfig, generate

__all__ = ["Replication", "MonteCarloSummary", "run_replication", "run_monte_carlo", "DEFAULT_SPEC"]

DEFAULT_SPEC = ModelSpec("probit", regressors=("omega", "Omega", "k", "K", "PCI", "TRM"))


@dataclass(frozen=True)
class Replication:
    seed: int
    n_obs: int
    estimates: Mapping[str, tuple[float, float]]  # name -> (coef, se)


@dataclass(frozen=True)
class MonteCarloSummary:
    truth: Mapping[str, float]
    replications: tuple[Replication, ...]
    level: float = 0.95

    def frame(self) -> pd.DataFrame:
        rows = []
        for rep in self.replications:
            for name, (b, se) in rep.estimates.items():
                rows.append((rep.seed, name, b, se))
        return pd.DataFrame(rows, columns=["seed", "name", "coef", "se"])

    def _arrays(self, name):
        b = np.array([r.estimates[name][0] for r in self.replications])
        se = np.array([r.estimates[name][1] for r in self.replications])
        return b, se

    def _crit(self) -> float:
        from scipy import stats

        return float(stats.norm.ppf(0.5 + self.level / 2))

    def sign_recovery(self, name: str) -> float:
        b, _ = self._arrays(name)
        return float(np.mean(np.sign(b) == np.sign(self.truth[name])))

    def coverage(self, name: str) -> float:
        b, se = self._arrays(name)
        return float(np.mean(np.abs(b - self.truth[name]) <= self._crit() * se))

    def rejection_rate(self, name: str) -> float:
        """Share of replications rejecting a zero coefficient at ``1 - level``."""
        b, se = self._arrays(name)
        return float(np.mean(np.abs(b) > self._crit() * se))


def run_replication(config: SynthConfig, spec: ModelSpec = DEFAULT_SPEC, names: Sequence[str] = ("omega", "Omega")) -> Replication:
    data = generate(config)
    result = run_pipeline(data.region_panel, data.port_panel, data.port_map, data.pci)
    fitted = fit(result.matched_table, spec)
    return Replication(config.seed, fitted.n_obs, {n: fitted.coef(n) for n in names})


def _job(args):
    return run_replication(*args)


def run_monte_carlo(
    base: SynthConfig,
    n_reps: int,
    spec: ModelSpec = DEFAULT_SPEC,
    names: Sequence[str] = ("omega", "Omega"),
    first_seed: int = 0,
    workers: int = 1,
) -> MonteCarloSummary:
    configs = [replace(base, seed=first_seed + r) for r in range(n_reps)]
    jobs = [(c, spec, tuple(names)) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(_job, jobs, chunksize=max(1, n_reps // (4 * workers))))
    else:
        reps = [_job(j) for j in jobs]
    truth = {n: base.coef(n) for n in names}
    return MonteCarloSummary(truth, tuple(reps))
