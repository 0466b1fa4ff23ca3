"""Numerical toolkit for fully coupled forward-backward stochastic control."""

from __future__ import annotations

__version__ = "0.1.0"
