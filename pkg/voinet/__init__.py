"""voinet: value-of-information scheduling over lossy, delayed channels."""

__version__ = "0.1.0"
