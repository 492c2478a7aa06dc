"""alloyforge: prompt-optimized LLM extraction, validation, and modeling of
alloy lattice-constant data."""

__version__ = "0.1.0"
