"""Sequential music recommendation trained against explicit and implicit negative feedback."""

__version__ = "0.1.0"
