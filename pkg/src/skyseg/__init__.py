"""Cloud segmentation of ground-based infrared sky images."""
from .core import ConfigurationError, DataError, ParseError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DataError", "ParseError", "__version__"]
