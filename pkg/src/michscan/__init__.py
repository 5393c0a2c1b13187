"""Black-box integrity checking of embedded neural networks from power traces."""

__version__ = "0.1.0"
