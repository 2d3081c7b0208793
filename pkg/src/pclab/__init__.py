"""Partitioned-control lab: OOD-gated imagined-state projection around
small learned continuous-control policies, with batch studies and a live
teleoperation service."""

__version__ = "0.1.0"
