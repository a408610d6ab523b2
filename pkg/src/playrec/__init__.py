"""Playtime-aware game recommendation: interest mixtures, multimodal walks, fused ranking."""

__version__ = "0.1.0"
