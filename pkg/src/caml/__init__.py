"""Correlation-aware mutual learning (co-teaching with cross-sample attention
and omni-correlation consistency) for semi-supervised 3D segmentation, on a
small numpy autodiff engine."""

__version__ = "0.1.0"
