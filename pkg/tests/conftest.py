import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from portspill.model import ExportPanel, Kind
from portspill.synth import SynthConfig, generate

settings.register_profile(
    "portspill", max_examples=120, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("portspill")


def random_panel(rng: np.random.Generator, kind=Kind.REGION, max_loc=8, max_prod=12, max_years=5) -> ExportPanel:
    """Sparse non-negative panel with at least one positive value per year."""
    n_loc = int(rng.integers(1, max_loc + 1))
    n_prod = int(rng.integers(1, max_prod + 1))
    n_years = int(rng.integers(1, max_years + 1))
    density = rng.uniform(0.2, 0.9)
    values = rng.lognormal(3.0, 1.5, (n_loc, n_prod, n_years)) * (rng.random((n_loc, n_prod, n_years)) < density)
    for t in range(n_years):
        if not values[:, :, t].any():
            values[rng.integers(n_loc), rng.integers(n_prod), t] = 1.0
    locs = tuple(f"L{n:02d}" for n in range(n_loc))
    prods = tuple(f"{1000 + 10 * n:04d}" for n in range(n_prod))
    years = tuple(range(2010, 2010 + n_years))
    return ExportPanel(kind, locs, prods, years, values)


SMALL_SYNTH = SynthConfig(n_regions=10, n_ports=5, n_products=60, n_years=8, seed=11)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SMALL_SYNTH)


@pytest.fixture(scope="session")
def paper_synth():
    """Default-size world (20 regions, 8 ports, 200 products, 12 years)."""
    return generate(SynthConfig(seed=5))


# criterion -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  [{detail}]")
