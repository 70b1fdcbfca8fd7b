"""Counter-based normal draws keyed by (seed, path, step, component).

Each path owns a Philox stream keyed by ``(seed, path)``; draws are consumed in
(step, component) order, so a value depends only on its key and never on how paths
are batched or scheduled.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def path_normals(seed: int, path: int, n_steps: int, n_comp: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[int(seed) & MASK64, int(path)]))
    return gen.standard_normal((n_steps, n_comp))


def normals(seed: int, paths: range, n_steps: int, n_comp: int) -> np.ndarray:
    """Array of shape ``(len(paths), n_steps, n_comp)``."""
    out = np.empty((len(paths), n_steps, n_comp))
    for j, p in enumerate(paths):
        out[j] = path_normals(seed, p, n_steps, n_comp)
    return out


def uniforms(seed: int, paths: range, n_steps: int) -> np.ndarray:
    """Uniforms on ``[0, 1)`` of shape ``(len(paths), n_steps)`` from a stream tagged apart from the normals."""
    out = np.empty((len(paths), n_steps))
    for j, p in enumerate(paths):
        gen = np.random.Generator(np.random.Philox(key=[int(seed) & MASK64, int(p)],
                                                   counter=[0, 0, 0, 1]))
        out[j] = gen.random(n_steps)
    return out
