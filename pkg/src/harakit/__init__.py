"""Automated hazard analysis and risk assessment pipeline with LLM-backed
generation steps, deterministic rule-based steps, quality linting, and a
human review service."""

__version__ = "0.1.0"
