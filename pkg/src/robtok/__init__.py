"""Robustness tokens for a frozen toy Vision Transformer."""

import ctypes
import sys

if sys.platform.startswith("linux"):
    # keep numpy temporaries on the heap instead of fresh mmaps; ~1.5x on small tensors
    try:
        _libc = ctypes.CDLL("libc.so.6")
        _libc.mallopt(-3, 64 << 20)  # M_MMAP_THRESHOLD
        _libc.mallopt(-1, 128 << 20)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass

__version__ = "0.1.0"
