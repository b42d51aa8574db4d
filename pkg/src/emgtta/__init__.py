"""Test-time adaptation for streaming multichannel gesture decoding."""

__version__ = "0.1.0"
