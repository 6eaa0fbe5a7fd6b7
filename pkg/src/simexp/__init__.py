"""Three-source causal evaluation workbench: OBS logs, EXP samples and a simulator."""

__version__ = "0.1.0"
