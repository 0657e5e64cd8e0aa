"""EvoMoE desk lab: two-phase MoE training and an expert-parallel communication simulator."""

__version__ = "0.1.0"
