"""Graph-based multimodal recommender with fused collaborative and modality item graphs."""

__version__ = "0.1.0"
