import numpy as np
import pytest

from portspill.montecarlo import MonteCarloSummary, Replication, run_monte_carlo, run_replication
from portspill.synth import SynthConfig

SMALL = SynthConfig(n_regions=10, n_ports=5, n_products=80, n_years=10)


def _summary(pairs, truth=1.0):
    reps = tuple(Replication(i, 100, {"omega": (b, se)}) for i, (b, se) in enumerate(pairs))
    return MonteCarloSummary({"omega": truth}, reps)


def test_summary_statistics():
    s = _summary([(1.0, 0.1), (1.5, 0.1), (-0.1, 0.5), (0.9, 0.4)])
    assert s.sign_recovery("omega") == 0.75
    # |b - 1| <= 1.96 se: yes, no, no (1.1 > 0.98), yes
    assert s.coverage("omega") == 0.5
    # |b| > 1.96 se: yes, yes, no, yes (0.9 > 0.784)
    assert s.rejection_rate("omega") == 0.75
    frame = s.frame()
    assert list(frame.columns) == ["seed", "name", "coef", "se"] and len(frame) == 4


def test_replication_is_deterministic():
    a = run_replication(SMALL)
    b = run_replication(SMALL)
    assert a == b
    assert set(a.estimates) == {"omega", "Omega"}
    assert a.n_obs > 0


def test_workers_do_not_change_results():
    serial = run_monte_carlo(SMALL, 3, first_seed=7)
    pooled = run_monte_carlo(SMALL, 3, first_seed=7, workers=2)
    assert serial.replications == pooled.replications
    assert [r.seed for r in serial.replications] == [7, 8, 9]
    assert serial.truth == {"omega": 7.0, "Omega": 0.7}


def test_planted_signs_small_world():
    s = run_monte_carlo(SMALL, 4)
    assert s.sign_recovery("omega") == 1.0
    b = s.frame().query("name == 'omega'")["coef"]
    assert np.all(np.isfinite(b))
