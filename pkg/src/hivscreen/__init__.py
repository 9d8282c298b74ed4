"""Guideline-driven HIV screening pipeline over multi-run LLM inference."""

__version__ = "0.1.0"
