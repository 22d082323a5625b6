"""Training: analytic backprop into context tokens or a linear head, SGD with
momentum and cosine-decayed learning rate, evaluation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import objectives as obj
from .alignment import AlignConfig, align_loss, align_target, alpha_schedule, total_loss
from .candidates import gen_instance_dependent, gen_uniform
from .encoder_sim import (
    PartialDataset,
    World,
    WorldConfig,
    calibrate_sigma,
    class_posterior,
    make_world,
    pooled_tokens,
    sample_dataset,
)
from .errors import ConfigError, NumericError
from .numerics import gauss, l2_normalize, make_rng, softmax, softmax_backward

LINEAR_PROBE_GRID = (2.5, 1.0, 0.5, 0.25, 0.1, 0.05, 0.01)
PROMPT_INIT_STD = 0.02

_CAND_STREAM = 11
_INIT_STREAM = 12
_SHUFFLE_STREAM = 13
_AUG_STREAM = 14


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.002
    lr_min: float = 1e-5
    epochs: int = 50
    batch: int = 32
    momentum: float = 0.9
    objective: str = "proden"
    use_alignment: bool = False
    align: AlignConfig = AlignConfig()
    q: float = 0.3
    candidate_mode: str = "uniform"
    seed: int = 0
    world: WorldConfig = WorldConfig()
    mode: str = "prompt"
    lw_beta: float = 1.0
    pllcr_lambda: float = 1.0
    pllcr_views: int = 2
    sigma_aug: float = 0.1
    pico: obj.PicoConfig = obj.PicoConfig()

    def __post_init__(self):
        if not self.lr0 > self.lr_min >= 0:
            raise ConfigError("require lr0 > lr_min >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum out of range [0, 1)")
        if self.objective not in obj.OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.q <= 1.0:
            raise ConfigError("q out of range")
        if self.candidate_mode not in ("uniform", "instance"):
            raise ConfigError(f"unknown candidate_mode {self.candidate_mode!r}")
        if self.mode not in ("prompt", "linear"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.pllcr_views < 1 or self.sigma_aug < 0 or self.lw_beta < 0:
            raise ConfigError("invalid pllcr/lw settings")

    @property
    def pllcr_t_prime(self) -> float:
        return max(self.epochs / 2.0, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_acc: float
    zero_shot_acc: float
    lr: float
    diag_counters: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    params: dict
    world: World
    data: PartialDataset
    sigma_img: float


# ----------------------------------------------------------------- schedule


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    if cfg.epochs == 1:
        return cfg.lr0
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * t / (cfg.epochs - 1)))


def sgd_step(params, grad, velocity, lr: float, momentum: float):
    velocity = momentum * velocity + grad
    return params - lr * velocity, velocity


# ------------------------------------------------------- forward / backward


@dataclass
class PromptCache:
    images: np.ndarray
    proj: np.ndarray      # (C, d) pre-normalization text vectors
    norms: np.ndarray     # (C,)
    text: np.ndarray      # (C, d) unit text embeddings
    sims: np.ndarray      # (B, C)
    probs: np.ndarray     # (B, C)
    n_context: int


def forward_prompt(world: World, context: np.ndarray, images: np.ndarray) -> PromptCache:
    images = np.atleast_2d(images)
    proj = pooled_tokens(world, context) @ world.text_proj.T
    norms = np.linalg.norm(proj, axis=1)
    text = proj / norms[:, None]
    sims = images @ text.T
    return PromptCache(images, proj, norms, text, sims, softmax(sims, world.tau), context.shape[0])


def backward_prompt(world: World, cache: PromptCache, dL_df: np.ndarray) -> np.ndarray:
    """dL/d(context tokens) given dL/df, through softmax, cosine, normalization, W and mean pooling."""
    d_sims = softmax_backward(cache.probs, dL_df, world.tau)
    d_text = d_sims.T @ cache.images
    radial = (d_text * cache.text).sum(axis=1, keepdims=True)
    d_proj = (d_text - radial * cache.text) / cache.norms[:, None]
    d_pooled = d_proj @ world.text_proj
    per_token = d_pooled.sum(axis=0) / (cache.n_context + 1)
    grad = np.broadcast_to(per_token, (cache.n_context, world.e)).copy()
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite prompt gradient")
    return grad


@dataclass
class LinearCache:
    images: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def forward_linear(head: dict, images: np.ndarray) -> LinearCache:
    images = np.atleast_2d(images)
    logits = images @ head["weights"].T + head["bias"]
    return LinearCache(images, logits, softmax(logits, 1.0))


def backward_linear(cache: LinearCache, dL_df: np.ndarray) -> dict:
    d_logits = softmax_backward(cache.probs, dL_df, 1.0)
    grad = {"weights": d_logits.T @ cache.images, "bias": d_logits.sum(axis=0)}
    if not all(np.all(np.isfinite(g)) for g in grad.values()):
        raise NumericError("non-finite linear-head gradient")
    return grad


def _logits_of(cache) -> np.ndarray:
    return cache.sims if isinstance(cache, PromptCache) else cache.logits


# ---------------------------------------------------------- objective glue


@dataclass
class ObjectiveState:
    conf: np.ndarray | None = None
    pico: obj.PicoState | None = None


def init_objective_state(cfg: TrainConfig, f_train, Y, images, diag: Counter | None = None) -> ObjectiveState:
    """Confidence / PiCO state from the untrained model's outputs."""
    if cfg.objective in ("proden", "lw"):
        return ObjectiveState(conf=obj.init_confidence(f_train, Y, diag))
    if cfg.objective == "pico":
        capacity = min(cfg.pico.queue_size, f_train.shape[0])
        return ObjectiveState(pico=obj.pico_init(images, f_train, Y, capacity, cfg.pico.proto_momentum, diag))
    return ObjectiveState()


def objective_loss(
    cfg: TrainConfig,
    state: ObjectiveState,
    cache,
    Y: np.ndarray,
    y: np.ndarray,
    indices: np.ndarray,
    epoch: int,
    view_caches=(),
    g_hand: np.ndarray | None = None,
    frozen: dict | None = None,
    diag: Counter | None = None,
):
    """Total batch loss for ``cfg``; returns (LossValue, frozen targets, updated state).

    Passing ``frozen`` from an earlier call re-evaluates the loss with every
    detached target held at those values, without touching ``state``.
    """
    f = cache.probs
    name = cfg.objective
    replay = frozen is not None
    frozen = dict(frozen or {})
    new_state = state

    if name == "ce":
        loss = obj.ce_loss(f, y, diag)
    elif name == "naive":
        loss = obj.naive_avg_loss(f, Y, diag)
    elif name == "cc":
        loss = obj.cc_loss(f, Y, diag)
    elif name == "proden":
        rows = frozen.setdefault("conf", state.conf[indices].copy())
        loss = obj.proden_loss(rows, f, np.arange(len(indices)), diag)
        if not replay:
            new_state = replace(state, conf=obj.proden_update(state.conf, f, Y, indices, diag))
    elif name == "lw":
        rows = frozen.setdefault("conf", state.conf[indices].copy())
        w = frozen.setdefault("lw_weights", obj.lw_weights(f, Y))
        loss = obj.lw_loss(rows, f, Y, cfg.lw_beta, weights=w, diag=diag)
        if not replay:
            new_state = replace(state, conf=obj.proden_update(state.conf, f, Y, indices, diag))
    elif name == "cavl":
        sel = frozen.setdefault("cavl", obj.cavl_select(_logits_of(cache), Y))
        loss = obj.ce_loss(f, sel, diag)
    elif name == "pllcr":
        views = [vc.probs for vc in view_caches]
        targets = frozen.setdefault("pllcr", obj.pllcr_targets(views, Y, diag))
        loss = obj.pllcr_loss(f, views, Y, epoch, cfg.pllcr_lambda, cfg.pllcr_t_prime, targets, diag)
    elif name == "pico":
        if replay:
            base = obj._weighted_ce(frozen["pico_targets"], f, diag)
            loss = obj.LossValue(base.value + frozen["pico_const"], base.grad)
        else:
            loss, pico = obj.pico_step(state.pico, f, cache.images, Y, indices, epoch, cfg.pico, diag)
            rows = pico.pseudo_targets[indices].copy()
            frozen["pico_targets"] = rows
            frozen["pico_const"] = loss.value - obj._weighted_ce(rows, f, None).value
            new_state = replace(state, pico=pico)
    else:
        raise ConfigError(f"unknown objective {name!r}")

    if cfg.use_alignment:
        if "align" not in frozen:
            alpha = alpha_schedule(epoch, cfg.align)
            frozen["align"] = align_target(f, g_hand, Y, alpha, diag)
        loss = total_loss(loss, align_loss(frozen["align"], f, diag), cfg.align.beta)
    if not np.isfinite(loss.value):
        raise NumericError(f"non-finite {name} loss at epoch {epoch}")
    return loss, frozen, new_state


def augment(images: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return l2_normalize(images + gauss(rng, images.shape, 0.0, sigma))


# ------------------------------------------------------------------- runs


def evaluate(world: World, context: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> float:
    if len(test_y) == 0:
        raise ConfigError("empty test set")
    sims = forward_prompt(world, np.asarray(context, dtype=np.float64), test_x).sims
    return float(np.mean(np.argmax(sims, axis=1) == test_y))


def evaluate_linear(head: dict, test_x: np.ndarray, test_y: np.ndarray) -> float:
    if len(test_y) == 0:
        raise ConfigError("empty test set")
    logits = np.atleast_2d(test_x) @ head["weights"].T + head["bias"]
    return float(np.mean(np.argmax(logits, axis=1) == test_y))


def build_problem(cfg: TrainConfig) -> tuple[World, PartialDataset, float]:
    """World, dataset with candidate sets, and the sigma_img used; deterministic in cfg.seed."""
    world = make_world(cfg.world, cfg.seed)
    sigma = cfg.world.sigma_img
    if cfg.world.target_zs is not None:
        sigma = calibrate_sigma(world, cfg.world, tuple(cfg.world.target_zs), cfg.seed)
    data = sample_dataset(world, cfg.world, cfg.seed, sigma)
    if cfg.candidate_mode == "uniform":
        data.candidates = gen_uniform(data.train_y, world.C, cfg.q, make_rng([cfg.seed, _CAND_STREAM]))
    else:
        g = class_posterior(world, world.handcrafted_context, data.train_x)
        if cfg.q == 0:
            data.candidates = np.eye(world.C, dtype=bool)[data.train_y]
        else:
            data.candidates = gen_instance_dependent(g, data.train_y, cfg.q)
    data.meta.update(q=cfg.q, candidate_mode=cfg.candidate_mode)
    return world, data, sigma


def init_params(cfg: TrainConfig, world: World) -> dict:
    rng = make_rng([cfg.seed, _INIT_STREAM])
    if cfg.mode == "prompt":
        return {"context": gauss(rng, (cfg.world.M, world.e), 0.0, PROMPT_INIT_STD)}
    return {
        "weights": gauss(rng, (world.C, world.d), 0.0, PROMPT_INIT_STD),
        "bias": np.zeros(world.C),
    }


def run_training(cfg: TrainConfig, problem=None) -> TrainResult:
    world, data, sigma = problem if problem is not None else build_problem(cfg)
    params = init_params(cfg, world)
    prompt_mode = cfg.mode == "prompt"

    def forward(images):
        if prompt_mode:
            return forward_prompt(world, params["context"], images)
        return forward_linear(params, images)

    def backward(cache, g):
        if prompt_mode:
            return {"context": backward_prompt(world, cache, g)}
        return backward_linear(cache, g)

    def test_acc():
        if prompt_mode:
            return evaluate(world, params["context"], data.test_x, data.test_y)
        return evaluate_linear(params, data.test_x, data.test_y)

    Y_all = data.candidates
    g_hand = class_posterior(world, world.handcrafted_context, data.train_x)
    zs_acc = evaluate(world, world.handcrafted_context, data.test_x, data.test_y)
    diag: Counter = Counter()
    state = init_objective_state(cfg, forward(data.train_x).probs, Y_all, data.train_x, diag)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    N = data.n_train
    records = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = make_rng([cfg.seed, _SHUFFLE_STREAM, epoch]).permutation(N)
        aug_rng = make_rng([cfg.seed, _AUG_STREAM, epoch])
        total, seen = 0.0, 0
        for start in range(0, N, cfg.batch):
            idx = order[start:start + cfg.batch]
            x = data.train_x[idx]
            cache = forward(x)
            views = ()
            if cfg.objective == "pllcr":
                views = [forward(augment(x, cfg.sigma_aug, aug_rng)) for _ in range(cfg.pllcr_views)]
            loss, _, state = objective_loss(
                cfg, state, cache, Y_all[idx], data.train_y[idx], idx, epoch, views, g_hand[idx], diag=diag
            )
            grads = backward(cache, loss.grad)
            for vc, vg in zip(views, loss.view_grads):
                for k, g in backward(vc, vg).items():
                    grads[k] = grads[k] + g
            for k in params:
                params[k], velocity[k] = sgd_step(params[k], grads[k], velocity[k], lr, cfg.momentum)
            total += loss.value * len(idx)
            seen += len(idx)
        records.append(MetricsRecord(epoch, total / seen, test_acc(), zs_acc, lr, dict(diag)))
    return TrainResult(records, params, world, data, sigma)


def train_run(cfg: TrainConfig) -> list[MetricsRecord]:
    return run_training(cfg).records


def linear_probe_run(cfg: TrainConfig, lr_grid=LINEAR_PROBE_GRID) -> list[MetricsRecord]:
    """Linear head on frozen image embeddings; keep the grid run with best final test accuracy."""
    lr_grid = list(lr_grid)
    if not lr_grid:
        raise ConfigError("lr_grid must be non-empty")
    problem = build_problem(cfg)
    best = None
    for lr in lr_grid:
        run_cfg = replace(cfg, mode="linear", lr0=float(lr))
        records = run_training(run_cfg, problem).records
        if best is None or records[-1].test_acc > best[-1].test_acc:
            best = records
    return best
