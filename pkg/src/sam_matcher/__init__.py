"""Structured attention-based semi-dense image matching."""
from .model import SAM, SAMConfig, MatchRecord, match_pair

__version__ = "0.1.0"

__all__ = ["SAM", "SAMConfig", "MatchRecord", "match_pair", "__version__"]
