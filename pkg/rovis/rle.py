"""Run-length encoding for binary masks.

Runs are taken over the row-major flattened mask and alternate
background/foreground, always starting with a (possibly empty) background run.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .errors import FormatError


def rle_encode(mask: np.ndarray) -> List[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise FormatError(f"negative run length in {counts[:8]}...")
    total = sum(counts)
    if total != height * width:
        raise FormatError(f"run lengths sum to {total}, expected {height}x{width}={height * width}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)
