"""Flow-level alpha-fair bandwidth-sharing networks: allocation, simulation and bounds."""

__version__ = "0.1.0"
