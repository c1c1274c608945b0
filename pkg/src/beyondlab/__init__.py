"""Desk-scale lab for neighbor-based adversarial example detection."""
__version__ = "0.1.0"
