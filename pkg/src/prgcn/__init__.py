"""PR-GCN style 6D pose estimation at desk scale, on a small numpy autodiff engine."""

__version__ = "0.1.0"
