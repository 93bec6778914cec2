"""Multilingual long-tail speech recognition with dual adapters and prior-adjusted logits."""

__version__ = "0.1.0"
