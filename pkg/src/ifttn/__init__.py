"""Two-stream video classification with fused feature pyramids and a temporal
transformation branch over ordered snippet pairs, on a small numpy autodiff core."""

__version__ = "0.1.0"
