"""Simulator for switch-assisted aggregation of sparse gradients."""

__version__ = "0.1.0"
