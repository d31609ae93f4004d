"""Desk-scale MambaJSCC: VSSM joint source-channel coding over simulated wireless channels."""

__version__ = "0.1.0"
