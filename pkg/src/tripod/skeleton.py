"""Joint conventions: bone lists and rest-pose templates."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

# neck, l/r shoulder, l/r elbow, l/r wrist, l/r hip, l/r knee, l/r ankle
BONES_13: List[Tuple[int, int]] = [
    (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
    (0, 7), (0, 8), (7, 8), (7, 9), (8, 10), (9, 11), (10, 12),
]
# head first, then the 13-joint layout shifted by one
BONES_14: List[Tuple[int, int]] = [(0, 1)] + [(a + 1, b + 1) for a, b in BONES_13]

_TEMPLATE_13 = np.array([
    [0.0, 1.5],
    [-0.2, 1.45], [0.2, 1.45],
    [-0.3, 1.15], [0.3, 1.15],
    [-0.35, 0.85], [0.35, 0.85],
    [-0.12, 0.9], [0.12, 0.9],
    [-0.13, 0.5], [0.13, 0.5],
    [-0.14, 0.05], [0.14, 0.05],
])


def bones(K: int) -> List[Tuple[int, int]]:
    if K == 13:
        return BONES_13
    if K == 14:
        return BONES_14
    return [(k, k + 1) for k in range(K - 1)]


def skeleton_mask(K: int) -> np.ndarray:
    """Symmetric bone adjacency with self-loops."""
    m = np.eye(K, dtype=bool)
    for a, b in bones(K):
        m[a, b] = m[b, a] = True
    return m


def template(K: int, d: int) -> np.ndarray:
    """Rest pose ``(K, d)`` centred near a root at the origin, unit-ish height."""
    if K == 13:
        base = _TEMPLATE_13
    elif K == 14:
        base = np.vstack([[0.0, 1.7], _TEMPLATE_13])
    else:
        base = np.stack([np.zeros(K), np.linspace(1.5, 0.0, K)], axis=1)
    base = base - np.array([0.0, 0.9])
    if d == 3:
        base = np.hstack([base[:, :1], np.zeros((K, 1)), base[:, 1:]])
    return base.copy()
