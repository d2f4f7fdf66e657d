"""Port-level product-space spillovers: RCA, proximity, density, jumps, probit estimation."""

__version__ = "0.1.0"
