"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


DEFAULT_STEP = 1e-5


def central_difference(
    func: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP
) -> np.ndarray:
    point = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(point)
    flat_point = point.reshape(-1)
    flat_grad = grad.reshape(-1)
    for index in range(flat_point.size):
        original = flat_point[index]
        flat_point[index] = original + h
        upper = func(point.copy())
        flat_point[index] = original - h
        lower = func(point.copy())
        flat_point[index] = original
        flat_grad[index] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale
