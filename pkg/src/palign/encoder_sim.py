"""Synthetic frozen dual encoder.

Text side: a prompt for class ``i`` is the token list ``[v_1..v_M, c_i]``; its
embedding is ``normalize(W @ mean(tokens))``. Image side: an image of class
``i`` is ``normalize(u_i + sigma * eps)`` where ``u_i`` is the text embedding
under the hidden oracle context. The handcrafted context is the oracle context
plus ``rho``-scaled noise, so ``rho`` controls zero-shot quality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ConfigError, DegenerateVectorError
from .numerics import NORM_EPS, gauss, l2_normalize, make_rng, softmax

# Sub-stream ids for seed derivation.
_WORLD_STREAM = 101
_DATA_STREAM = 202
_PROBE_STREAM = 303


@dataclass(frozen=True)
class WorldConfig:
    C: int = 10
    d: int = 64
    e: int = 32
    M: int = 16
    M_h: int = 8
    sigma_img: float = 0.35
    rho: float = 0.5
    tau: float = 0.01
    shots: int = 16
    test_per_class: int = 100
    # When set, sigma_img is replaced by calibrate_sigma(..., target_zs) per world.
    target_zs: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("C", "d", "e", "M", "M_h", "shots", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"world.{name} must be >= 1")
        if self.C < 2:
            raise ConfigError("world.C must be >= 2")
        if self.sigma_img < 0 or self.rho < 0:
            raise ConfigError("world.sigma_img and world.rho must be non-negative")
        if not self.tau > 0:
            raise ConfigError("world.tau must be positive")
        if self.target_zs is not None:
            lo, hi = self.target_zs
            if not 0 <= lo <= hi <= 1:
                raise ConfigError("world.target_zs must satisfy 0 <= lo <= hi <= 1")


@dataclass(frozen=True, eq=False)
class World:
    """Frozen encoder parameters. Arrays are read-only."""

    text_proj: np.ndarray          # (d, e)
    class_tokens: np.ndarray       # (C, e)
    oracle_context: np.ndarray     # (M_h, e)
    handcrafted_context: np.ndarray  # (M_h, e)
    tau: float

    def __post_init__(self):
        for arr in (self.text_proj, self.class_tokens, self.oracle_context, self.handcrafted_context):
            arr.setflags(write=False)

    @property
    def C(self) -> int:
        return self.class_tokens.shape[0]

    @property
    def d(self) -> int:
        return self.text_proj.shape[0]

    @property
    def e(self) -> int:
        return self.text_proj.shape[1]

    def fingerprint(self) -> bytes:
        return b"".join(
            a.tobytes()
            for a in (self.text_proj, self.class_tokens, self.oracle_context, self.handcrafted_context)
        ) + np.float64(self.tau).tobytes()


@dataclass
class PartialDataset:
    train_x: np.ndarray   # (N, d) unit rows
    train_y: np.ndarray   # (N,) int
    test_x: np.ndarray
    test_y: np.ndarray
    candidates: np.ndarray | None = None  # (N, C) bool mask
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    def to_json(self) -> dict:
        cand = None
        if self.candidates is not None:
            cand = [np.flatnonzero(row).tolist() for row in self.candidates]
        return {
            "train": {
                "images": self.train_x.tolist(),
                "labels": self.train_y.tolist(),
                "candidates": cand,
            },
            "test": {"images": self.test_x.tolist(), "labels": self.test_y.tolist()},
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict, num_classes: int | None = None) -> "PartialDataset":
        train_y = np.asarray(doc["train"]["labels"], dtype=np.int64)
        cand_lists = doc["train"].get("candidates")
        cand = None
        if cand_lists is not None:
            C = num_classes or int(doc.get("meta", {}).get("C", 0)) or (max(max(s) for s in cand_lists) + 1)
            cand = np.zeros((len(cand_lists), C), dtype=bool)
            for i, members in enumerate(cand_lists):
                cand[i, members] = True
        return cls(
            train_x=np.asarray(doc["train"]["images"], dtype=np.float64),
            train_y=train_y,
            test_x=np.asarray(doc["test"]["images"], dtype=np.float64),
            test_y=np.asarray(doc["test"]["labels"], dtype=np.int64),
            candidates=cand,
            meta=dict(doc.get("meta", {})),
        )

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path, num_classes: int | None = None) -> "PartialDataset":
        return cls.from_json(json.loads(Path(path).read_text()), num_classes)


def make_world(cfg: WorldConfig, seed: int) -> World:
    rng = make_rng([seed, _WORLD_STREAM])
    W = gauss(rng, (cfg.d, cfg.e), 0.0, 1.0 / np.sqrt(cfg.e))
    class_tokens = gauss(rng, (cfg.C, cfg.e))
    oracle = gauss(rng, (cfg.M_h, cfg.e))
    noise = gauss(rng, (cfg.M_h, cfg.e))
    handcrafted = oracle + cfg.rho * noise if cfg.rho > 0 else oracle.copy()
    return World(W, class_tokens, oracle, handcrafted, float(cfg.tau))


def pooled_tokens(world: World, context: np.ndarray) -> np.ndarray:
    """Mean of ``[context..., c_i]`` for every class i, shape (C, e)."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 2 or context.shape[0] == 0 or context.shape[1] != world.e:
        raise ConfigError(f"context must have shape (M>=1, {world.e}), got {context.shape}")
    m = context.shape[0]
    return (context.sum(axis=0)[None, :] + world.class_tokens) / (m + 1)


def text_embeddings(world: World, context: np.ndarray) -> np.ndarray:
    """Unit text embeddings of all C prompts, shape (C, d)."""
    a = pooled_tokens(world, context) @ world.text_proj.T
    if np.any(np.linalg.norm(a, axis=1) <= NORM_EPS):
        raise DegenerateVectorError("projected prompt has near-zero norm")
    return l2_normalize(a)


def text_embed(world: World, context: np.ndarray, class_idx: int) -> np.ndarray:
    if not 0 <= class_idx < world.C:
        raise ConfigError(f"class index {class_idx} out of range")
    return text_embeddings(world, context)[class_idx]


def similarities(world: World, context: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Cosine similarities, shape (B, C)."""
    return np.atleast_2d(images) @ text_embeddings(world, context).T


def class_posterior(world: World, context: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Softmax of similarities / tau. A single image gives a (C,) Dist, a batch (B, C)."""
    images = np.asarray(images, dtype=np.float64)
    f = softmax(similarities(world, context, images), world.tau)
    return f[0] if images.ndim == 1 else f


def predict(world: World, context: np.ndarray, images: np.ndarray) -> np.ndarray:
    return np.argmax(similarities(world, context, images), axis=1)


def zero_shot_accuracy(world: World, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(world, world.handcrafted_context, images) == labels))


def class_directions(world: World) -> np.ndarray:
    return text_embeddings(world, world.oracle_context)


def _draw_images(directions: np.ndarray, per_class: int, sigma: float, rng) -> tuple[np.ndarray, np.ndarray]:
    C, d = directions.shape
    labels = np.repeat(np.arange(C), per_class)
    eps = gauss(rng, (C * per_class, d))
    x = directions[labels] + sigma * eps if sigma > 0 else directions[labels].copy()
    return l2_normalize(x), labels


def sample_dataset(world: World, cfg: WorldConfig, seed: int, sigma_img: float | None = None) -> PartialDataset:
    """Draw ``shots`` train and ``test_per_class`` test images per class; candidates unset."""
    sigma = cfg.sigma_img if sigma_img is None else sigma_img
    if sigma < 0:
        raise ConfigError("sigma_img must be non-negative")
    u = class_directions(world)
    rng = make_rng([seed, _DATA_STREAM])
    train_x, train_y = _draw_images(u, cfg.shots, sigma, rng)
    test_x, test_y = _draw_images(u, cfg.test_per_class, sigma, rng)
    return PartialDataset(train_x, train_y, test_x, test_y, meta={"C": world.C, "sigma_img": sigma})


def calibrate_sigma(
    world: World,
    cfg: WorldConfig,
    target_zs: tuple[float, float],
    seed: int,
    max_iter: int = 30,
    sigma_max: float = 4.0,
) -> float:
    """Bisection on sigma_img so handcrafted zero-shot accuracy lands in ``target_zs``.

    The probe set reuses one noise draw for every sigma, which keeps the
    accuracy curve monotone enough for bisection.
    """
    lo_t, hi_t = target_zs
    if not lo_t <= hi_t or hi_t <= 1.0 / world.C:
        raise CalibrationError(f"target {target_zs} not above chance 1/{world.C}")
    u = class_directions(world)
    rng = make_rng([seed, _PROBE_STREAM])
    per_class = cfg.test_per_class
    labels = np.repeat(np.arange(world.C), per_class)
    eps = gauss(rng, (labels.size, world.d))

    def acc(sigma: float) -> float:
        return zero_shot_accuracy(world, l2_normalize(u[labels] + sigma * eps), labels)

    def inside(a: float) -> bool:
        return lo_t <= a <= hi_t

    a_lo = acc(0.0)
    if inside(a_lo):
        return 0.0
    if a_lo < lo_t:
        raise CalibrationError(f"zero-shot accuracy {a_lo:.3f} at sigma=0 is below target {target_zs}")
    a_hi = acc(sigma_max)
    if inside(a_hi):
        return sigma_max
    if a_hi > hi_t:
        raise CalibrationError(f"zero-shot accuracy {a_hi:.3f} at sigma={sigma_max} is above target {target_zs}")
    lo, hi = 0.0, sigma_max
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        a = acc(mid)
        if inside(a):
            return mid
        if a > hi_t:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(f"bisection did not reach target {target_zs} in {max_iter} iterations")
