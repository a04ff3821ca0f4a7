"""Performance models, functional executors and pipeline simulation for LLM
inference on hierarchical-memory many-core accelerators."""

__version__ = "0.1.0"
