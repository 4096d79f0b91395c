"""Modality-heterogeneous federated learning simulator.

Two-stage training (modality-aware FedAvg, then federated distillation into an
audio-only student) plus UniFL, MultiFL and Harmony baselines, on synthetic
audio-visual data with numpy-only dense networks.
"""

__version__ = "0.1.0"
