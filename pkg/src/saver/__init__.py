"""Belief selection, faithfulness auditing and minimal repair for reasoning agents."""

__version__ = "0.1.0"
