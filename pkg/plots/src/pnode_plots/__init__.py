"""Offline figure rendering for benchmark output files."""

from .render import FigureSpec, SchemaError, render

__version__ = "0.1.0"
