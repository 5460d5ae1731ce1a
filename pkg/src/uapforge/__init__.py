"""Universal adversarial audio patches that stay effective at any utterance length."""

__version__ = "0.1.0"
