"""Domain generalization with a domain-general and a domain-specific representation."""

__version__ = "0.1.0"
