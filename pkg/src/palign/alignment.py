"""Prompt alignment: mix candidate-restricted handcrafted and learnable posteriors
into a fixed target and pull the learnable posterior toward it."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SupportError
from .objectives import LossValue, _batch, _weighted_ce, combine, ramp, restricted


@dataclass(frozen=True)
class AlignConfig:
    lam: float = 0.5
    T_prime: int = 25
    beta: float = 1.0
    # Ablation: a constant mixing weight instead of the ramp.
    alpha_fixed: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("align.lambda out of range [0, 1]")
        if self.T_prime < 1:
            raise ConfigError("align.T_prime must be >= 1")
        if self.beta < 0:
            raise ConfigError("align.beta must be non-negative")
        if self.alpha_fixed is not None and not 0.0 <= self.alpha_fixed <= 1.0:
            raise ConfigError("align.alpha_fixed out of range [0, 1]")


def restrict_posterior(f, Y, diag: Counter | None = None) -> np.ndarray:
    """f renormalized over Y, zero off Y. Falls back to uniform over Y when Y has no mass."""
    f = np.asarray(f, dtype=np.float64)
    out = restricted(f, Y, diag)
    return out[0] if f.ndim == 1 else out


def alpha_schedule(t: float, cfg: AlignConfig = AlignConfig()) -> float:
    if t < 0:
        raise ConfigError("epoch index must be non-negative")
    if cfg.alpha_fixed is not None:
        return cfg.alpha_fixed
    return ramp(t, cfg.lam, cfg.T_prime)


def mix_posteriors(p_s, p_h, alpha: float, Y=None) -> np.ndarray:
    """α·p_s + (1−α)·p_h. With ``Y`` given, both inputs must carry no mass off Y."""
    p_s = np.asarray(p_s, dtype=np.float64)
    p_h = np.asarray(p_h, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha out of range: {alpha}")
    if p_s.shape != p_h.shape:
        raise SupportError("posterior shapes differ")
    if Y is not None:
        off = ~np.asarray(Y, dtype=bool).reshape(p_s.shape)
        if np.any(p_s[off] != 0) or np.any(p_h[off] != 0):
            raise SupportError("posterior has mass outside the candidate set")
    return alpha * p_s + (1.0 - alpha) * p_h


def align_target(f, g, Y, alpha: float, diag: Counter | None = None) -> np.ndarray:
    """The detached mixed target α·restrict(f) + (1−α)·restrict(g)."""
    return mix_posteriors(restricted(f, Y, diag), restricted(g, Y, diag), alpha, Y)


def align_loss(p_tilde, f, diag: Counter | None = None) -> LossValue:
    return _weighted_ce(_batch(p_tilde), _batch(f), diag)


def total_loss(pll: LossValue, align: LossValue, beta: float) -> LossValue:
    return combine(pll, align, beta)
