"""Frame contents for the simulated host memory.

Contents are named by integer ids. The bytes behind an id are produced by a
seeded PCG64 stream, so two frames can be compared in full without storing
4 KiB per frame. Id 0 is the all-zero page.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

from . import BASE_PAGE

ZERO_CONTENT = 0
# Frames never written by a loaded image carry an implicit unique id.
_FRESH_BASE = 1 << 62


@lru_cache(maxsize=1 << 14)
def content_bytes(content_id: int) -> bytes:
    if content_id == ZERO_CONTENT:
        return bytes(BASE_PAGE)
    return np.random.Generator(np.random.PCG64(content_id)).bytes(BASE_PAGE)


@lru_cache(maxsize=1 << 16)
def content_digest(content_id: int) -> int:
    """64-bit digest of the page bytes. A filter only; equal digests still
    need a full byte comparison before two frames may share."""
    h = hashlib.blake2b(content_bytes(content_id), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class ContentStore:
    """Map from frame number to content id."""

    def __init__(self, ids=None):
        self.ids: dict[int, int] = dict(ids or {})

    def __contains__(self, frame):
        return frame in self.ids

    def __len__(self):
        return len(self.ids)

    def get(self, frame: int) -> int:
        return self.ids.get(frame, _FRESH_BASE + frame)

    def set(self, frame: int, content_id: int) -> None:
        self.ids[frame] = content_id

    def copy(self, src: int, dst: int) -> None:
        self.ids[dst] = self.get(src)

    def drop(self, frame: int) -> None:
        self.ids.pop(frame, None)

    def read(self, frame: int) -> bytes:
        return content_bytes(self.get(frame))

    def digest(self, frame: int) -> int:
        return content_digest(self.get(frame))

    def is_zero(self, frame: int) -> bool:
        return self.get(frame) == ZERO_CONTENT

    def same_content(self, a: int, b: int) -> bool:
        """Full comparison, digest first."""
        if self.digest(a) != self.digest(b):
            return False
        return self.read(a) == self.read(b)
