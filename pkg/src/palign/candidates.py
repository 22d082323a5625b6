"""Candidate-label generators and their audit.

Candidate sets are carried as boolean masks of shape (N, C); use
:func:`mask_to_sets` / :func:`sets_to_mask` to convert to sorted index tuples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AmbiguityStats:
    flip_rate: float
    avg_set_size: float
    coverage: float


def mask_to_sets(mask: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(i) for i in np.flatnonzero(row)) for row in np.asarray(mask, dtype=bool)]


def sets_to_mask(sets, C: int) -> np.ndarray:
    mask = np.zeros((len(sets), C), dtype=bool)
    for i, members in enumerate(sets):
        members = list(members)
        if not members or min(members) < 0 or max(members) >= C:
            raise ConfigError(f"candidate set {i} is empty or out of range")
        mask[i, members] = True
    return mask


def _as_mask(sets, C: int) -> np.ndarray:
    if isinstance(sets, np.ndarray) and sets.dtype == bool:
        return sets
    return sets_to_mask(sets, C)


def gen_uniform(true_labels, C: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Flip every negative label into the set independently with probability q."""
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"q out of range: {q}")
    y = np.asarray(true_labels, dtype=np.int64)
    mask = rng.random((y.size, C)) < q
    mask[np.arange(y.size), y] = True
    return mask


def gen_instance_dependent(zeroshot, true_labels, q: float) -> np.ndarray:
    """Admit the globally most confident ⌊q·N·(C−1)⌋ negative (example, label) pairs.

    Confidence is the handcrafted-prompt posterior. Ties are broken by
    (example index, label index) ascending.
    """
    g = np.asarray(zeroshot, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    if g.ndim != 2 or g.shape[0] != y.size:
        raise ConfigError("zeroshot must be an (N, C) array matching true_labels")
    if np.any(g < 0) or not np.allclose(g.sum(axis=1), 1.0, atol=1e-9) or not np.all(np.isfinite(g)):
        raise ConfigError("zeroshot rows must be probability vectors")
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"q out of range: {q}")
    N, C = g.shape
    k = int(np.floor(q * N * (C - 1)))
    mask = np.zeros((N, C), dtype=bool)
    mask[np.arange(N), y] = True
    if k > 0:
        neg = ~mask
        rows, cols = np.nonzero(neg)  # row-major: (example, label) ascending
        conf = g[rows, cols]
        # lexsort: last key is primary; stable so ties keep (row, col) order.
        order = np.lexsort((np.arange(conf.size), -conf))[:k]
        mask[rows[order], cols[order]] = True
    return mask


def ambiguity_stats(sets, true_labels, C: int) -> AmbiguityStats:
    y = np.asarray(true_labels, dtype=np.int64)
    mask = _as_mask(sets, C)
    if mask.shape[0] != y.size:
        raise ConfigError("sets and true_labels differ in length")
    sizes = mask.sum(axis=1)
    covered = mask[np.arange(y.size), y]
    # Negatives inside the set: |Y| minus the true label when covered.
    false_pos = sizes - covered.astype(np.int64)
    return AmbiguityStats(
        flip_rate=float(false_pos.sum() / (y.size * (C - 1))),
        avg_set_size=float(sizes.mean()),
        coverage=float(covered.mean()),
    )
