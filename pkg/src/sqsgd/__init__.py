"""Locally private, communication-efficient federated SGD."""

__version__ = "0.1.0"
