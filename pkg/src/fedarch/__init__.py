"""Deterministic federated-learning simulator comparing CNN and ViT architectures
under label-skewed client partitions."""

__version__ = "0.1.0"
