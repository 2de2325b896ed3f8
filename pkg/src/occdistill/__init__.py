"""Teacher-student distillation for classification under half-image occlusion."""

__version__ = "0.1.0"
