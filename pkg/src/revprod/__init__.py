"""Revenue-data production function, markup and demand estimation toolkit."""

__version__ = "0.1.0"
