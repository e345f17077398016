"""Precomputed 48-bit libraries (HD 11 to 23), regenerated by scripts/generate_libraries.py."""

from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path

from ..codec import MarkerLibrary

AVAILABLE = (11, 13, 15, 17, 19, 21, 23)
ENV_VAR = "STAGMARK_LIBRARY"


def library_path(min_hd: int) -> Path:
    return Path(__file__).with_name(f"hd{min_hd}.staglib")


@lru_cache(maxsize=None)
def load_library(min_hd: int) -> MarkerLibrary:
    path = library_path(min_hd)
    if not path.exists():
        raise FileNotFoundError(f"no shipped library for HD{min_hd}")
    return MarkerLibrary.load(path)


def default_library_path() -> Path:
    """Library used when none is given: $STAGMARK_LIBRARY or the HD11 file."""
    env = os.environ.get(ENV_VAR)
    return Path(env) if env else library_path(11)
