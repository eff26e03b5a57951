"""xdora-extract: encoder adapter producing XDEM embedding files."""

__version__ = "0.1.0"

from .config import ExtractConfig  # noqa: F401
from .extract import extract  # noqa: F401
