"""Role-aware multi-task talent ranking: encoders, gated MoE, three-task heads."""

__version__ = "0.1.0"
