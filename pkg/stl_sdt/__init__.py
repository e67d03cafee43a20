"""STL-SDT - temporal-logic robustness monitoring and specification-conditioned policies."""

from loguru import logger

__version__ = "0.1.0"

logger.disable("stl_sdt")
