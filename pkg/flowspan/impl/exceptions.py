# Copyright (c) 2024 flowspan developers
"""
Exception classes.
"""


class FlowspanException(Exception):
    """An exception generated by `flowspan` code."""
