"""On-policy distillation of flow-matching samplers on synthetic 2-D tasks."""

__version__ = "0.1.0"
