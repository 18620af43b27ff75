"""Component-level energy profiling of transformer inference on a simulated testbed."""

__version__ = "0.1.0"
