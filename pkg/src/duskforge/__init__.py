"""Zero-shot day-to-night adaptation by similarity min-max, on a numpy autodiff core."""
__version__ = "0.1.0"
