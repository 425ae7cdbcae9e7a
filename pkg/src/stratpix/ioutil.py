"""Atomic text file writes shared by all emitters.

Output files appear fully written or not at all: content goes to a
sibling temp file first and is renamed over the target, so concurrent
readers and interrupted runs never observe partial files.
"""

from __future__ import annotations

import os
from pathlib import Path


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path
