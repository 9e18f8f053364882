"""Corner-aligned linear interpolation weights shared by resampling code."""

import numpy as np


def corner_aligned_coords(n_in: int, n_out: int) -> np.ndarray:
    """Input coordinate of each output sample: ``i * (n_in - 1) / (n_out - 1)``."""
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def linear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix applying corner-aligned linear interpolation."""
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    coords = corner_aligned_coords(n_in, n_out)
    lo = np.minimum(np.floor(coords).astype(np.int64), n_in - 2)
    frac = coords - lo
    rows = np.arange(n_out)
    mat[rows, lo] += 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    coords = corner_aligned_coords(n_in, n_out)
    return np.clip(np.floor(coords + 0.5).astype(np.int64), 0, n_in - 1)
