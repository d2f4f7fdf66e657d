"""Exception types raised across the toolkit.

Every domain failure derives from :class:`PortSpillError`; the CLI maps these
to exit status 1 and :class:`ConfigError` to exit status 2.
"""

from __future__ import annotations


class PortSpillError(Exception):
    """Base class for domain errors."""


class ConfigError(PortSpillError):
    pass


class MalformedRow(PortSpillError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnknownProductCode(PortSpillError):
    def __init__(self, code: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown product code {code!r}{where}")
        self.code = code
        self.line = line


class UnknownLocationCode(PortSpillError):
    def __init__(self, code: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown location code {code!r}{where}")
        self.code = code
        self.line = line


class MissingConcordance(PortSpillError):
    def __init__(self, code: str):
        super().__init__(f"no concordance entry for HS2002 code {code!r}")
        self.code = code


class ConflictingMapping(PortSpillError):
    def __init__(self, country: str):
        super().__init__(f"country {country!r} mapped to more than one continent")
        self.country = country


class EmptyYear(PortSpillError):
    def __init__(self, year: int):
        super().__init__(f"year {year} has zero total export value")
        self.year = year


class UnknownProduct(PortSpillError):
    def __init__(self, code: str):
        super().__init__(f"product {code!r} is not in the product universe")
        self.code = code


class MissingRouting(PortSpillError):
    pass


class UnmappedCountry(PortSpillError):
    def __init__(self, code: str):
        super().__init__(f"destination country {code!r} has no continent")
        self.code = code


class UnmappedPort(PortSpillError):
    def __init__(self, code: str):
        super().__init__(f"port {code!r} is not in the port-region map")
        self.code = code


class WindowTooShort(PortSpillError):
    pass


class InfeasibleConfig(PortSpillError):
    pass


class NotConverged(PortSpillError):
    def __init__(self, iterations: int, loglik: float):
        super().__init__(f"no convergence after {iterations} iterations (loglik={loglik:.6f})")
        self.iterations = iterations
        self.loglik = loglik


class PerfectSeparation(PortSpillError):
    def __init__(self, column: str):
        super().__init__(f"{column} perfectly predicts the outcome")
        self.column = column


class SingularDesign(PortSpillError):
    def __init__(self, columns: list[str]):
        super().__init__(f"design matrix is rank deficient; collinear columns: {columns}")
        self.columns = columns


class MissingCovariate(PortSpillError):
    def __init__(self, name: str):
        super().__init__(f"missing covariate {name!r}")
        self.name = name


class UnknownCoefficient(PortSpillError):
    def __init__(self, name: str):
        super().__init__(f"unknown coefficient {name!r}")
        self.name = name


class MissingUpstreamArtifact(PortSpillError):
    def __init__(self, name: str):
        super().__init__(f"upstream artifact {name!r} not found; run the producing command first")
        self.name = name
