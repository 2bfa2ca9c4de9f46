"""Turn-based stroke forecasting with a multi-input encoder-decoder."""

__version__ = "0.1.0"
