"""Desk-scale continual self-supervised representation learning benchmark."""

__version__ = "0.1.0"
