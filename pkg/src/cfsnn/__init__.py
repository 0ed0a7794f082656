"""Spiking network direct-training engine with circulate-firing neurons."""

__version__ = "0.1.0"
