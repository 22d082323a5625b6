"""Numeric kernel: softmax, normalization, seeded sampling, finite differences.

All arrays are float64. Randomness goes through ``numpy.random.Generator``
(PCG64), created with :func:`make_rng`; equal seeds give bit-identical streams.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateVectorError, NumericError

PROB_FLOOR = 1e-300
NORM_EPS = 1e-12


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """PCG64 generator. A sequence seed derives an independent sub-stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis with max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not temperature > 0 or not np.isfinite(temperature):
        raise NumericError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logit")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Map dL/df to dL/dlogits for f = softmax(logits / temperature)."""
    inner = (probs * grad_probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner) / temperature


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm; rows are normalized independently for 2-D input."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError("vector norm below 1e-12")
    return v / norm


def argmax_lowest(x, axis: int = -1) -> np.ndarray:
    # np.argmax already returns the first maximal index.
    return np.argmax(np.asarray(x), axis=axis)


def gauss(rng: np.random.Generator, n, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """``n`` i.i.d. normal draws (``n`` may be a shape tuple)."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return mean + std * rng.standard_normal(n)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, any parameter shape."""
    if h <= 0:
        raise ValueError("h must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(p))
        flat[i] = orig - h
        down = float(loss_fn(p))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss at coordinate {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
