"""Publication-style figures from benchmark result files.

This package reads only the benchmark CLI's CSV outputs; it never imports
the modelling code. Four figure kinds are supported: grouped metric bars
with quantile whiskers, posterior KDE panels, observed/true/mean/sd map
panels, and model-vs-model scatter with credible-interval bars.
"""

__version__ = "0.1.0"

from .figures import FigureResult, MissingColumnError, render  # noqa: F401
