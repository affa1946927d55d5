"""Prototypical-part classifier with mask- and feedback-guided prototype supervision."""

__version__ = "0.1.0"
