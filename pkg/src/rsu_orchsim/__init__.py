"""Simulator and analysis toolkit for demand-driven orchestration of roadside collective perception."""

__version__ = "0.1.0"
