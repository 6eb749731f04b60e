"""Self-supervised adversarial hardening of monocular depth estimators."""

__version__ = "0.1.0"
