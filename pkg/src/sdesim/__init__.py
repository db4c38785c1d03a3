"""Discrete-event simulation of a software-defined edge protecting a geo-replicated
key-value store: flow duplication toward a backup datacenter and edge-level
disaster detection with traffic redirection."""

__version__ = "0.1.0"
