"""Taylor-expanded TD learning: analytic expected updates, the TaTD3 agent and analysis tools."""

__version__ = "0.1.0"
