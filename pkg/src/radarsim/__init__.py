"""Learned radar sensor models trained from unaligned radar and simulated elevation maps."""

__version__ = "0.1.0"
