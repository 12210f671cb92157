"""Distributed considerate MPC for heterogeneous heavy-truck platoons."""
__version__ = "0.1.0"
