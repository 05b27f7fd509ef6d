"""Per-session shopping-stage prediction from Google Analytics e-commerce exports."""

__version__ = "0.1.0"
