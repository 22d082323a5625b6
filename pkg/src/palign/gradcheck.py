"""Finite-difference verification of the end-to-end prompt and linear-head gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import objectives as obj
from .alignment import AlignConfig, align_loss, align_target
from .encoder_sim import WorldConfig, make_world
from .numerics import finite_diff_grad, gauss, l2_normalize, make_rng, rel_error
from .trainer import (
    TrainConfig,
    augment,
    backward_linear,
    backward_prompt,
    forward_linear,
    forward_prompt,
    init_objective_state,
    objective_loss,
)

TINY_WORLD = WorldConfig(C=3, d=4, e=3, M=2, M_h=2, tau=0.25, shots=2, test_per_class=1, sigma_img=0.5)
CHECKS = obj.OBJECTIVES + ("align",) + tuple(f"{name}+align" for name in obj.OBJECTIVES)


@dataclass
class CheckResult:
    name: str
    trial: int
    rel_err: float
    analytic_norm: float


def _instance(seed: int, batch: int = 6):
    rng = make_rng([seed, 9001])
    world = make_world(TINY_WORLD, seed)
    C, d = world.C, world.d
    y = rng.integers(0, C, size=batch)
    Y = rng.random((batch, C)) < 0.5
    Y[np.arange(batch), y] = True
    images = l2_normalize(gauss(rng, (batch, d)))
    context = gauss(rng, (TINY_WORLD.M, world.e), 0.0, 0.5)
    views = [augment(images, 0.3, rng) for _ in range(2)]
    g_hand = forward_prompt(world, world.handcrafted_context, images).probs
    return world, images, y, Y, context, views, g_hand


def _objective_name(check: str) -> tuple[str, bool]:
    if check == "align":
        return "ce", True
    if check.endswith("+align"):
        return check[: -len("+align")], True
    return check, False


def check_prompt(check: str, seed: int, h: float = 1e-5) -> CheckResult:
    world, images, y, Y, context, view_imgs, g_hand = _instance(seed)
    name, use_align = _objective_name(check)
    cfg = TrainConfig(
        objective=name, use_alignment=use_align, epochs=6, world=TINY_WORLD,
        align=AlignConfig(lam=0.5, T_prime=4, beta=1.0),
    )
    idx = np.arange(images.shape[0])
    epoch = 2

    def forward(ctx):
        return forward_prompt(world, ctx, images), [forward_prompt(world, ctx, v) for v in view_imgs]

    cache, views = forward(context)
    if name != "pllcr":
        views = []
    # State drawn from a different prompt so targets are not trivially the current output.
    other = forward_prompt(world, context[::-1] * 0.7, images).probs
    state = init_objective_state(cfg, other, Y, images)
    if name == "pico":
        _, _, state = objective_loss(cfg, state, cache, Y, y, idx, epoch, (), g_hand)

    if check == "align":
        target = align_target(cache.probs, g_hand, Y, 0.25)
        loss = align_loss(target, cache.probs)
        analytic = backward_prompt(world, cache, loss.grad)

        def fn(ctx):
            return align_loss(target, forward_prompt(world, ctx, images).probs).value
    else:
        loss, frozen, _ = objective_loss(cfg, state, cache, Y, y, idx, epoch, views, g_hand)
        analytic = backward_prompt(world, cache, loss.grad)
        for vc, vg in zip(views, loss.view_grads):
            analytic = analytic + backward_prompt(world, vc, vg)

        def fn(ctx):
            c, vs = forward(ctx)
            return objective_loss(cfg, state, c, Y, y, idx, epoch, vs if name == "pllcr" else (), g_hand,
                                  frozen=frozen)[0].value

    numeric = finite_diff_grad(fn, context, h)
    return CheckResult(check, seed, rel_error(analytic, numeric), float(np.linalg.norm(analytic)))


def check_linear(objective: str, seed: int, h: float = 1e-5) -> CheckResult:
    """Linear-probe head gradient (weights and bias) against finite differences."""
    world, images, y, Y, _, view_imgs, g_hand = _instance(seed)
    rng = make_rng([seed, 9002])
    head = {"weights": gauss(rng, (world.C, world.d)), "bias": gauss(rng, world.C)}
    cfg = TrainConfig(objective=objective, world=TINY_WORLD, mode="linear", epochs=6)
    idx = np.arange(images.shape[0])
    nw = head["weights"].size

    def unflatten(flat):
        return {"weights": flat[:nw].reshape(head["weights"].shape), "bias": flat[nw:]}

    def forward(params):
        views = [forward_linear(params, v) for v in view_imgs] if objective == "pllcr" else []
        return forward_linear(params, images), views

    cache, views = forward(head)
    other = forward_linear({k: v * 0.5 for k, v in head.items()}, images).probs
    state = init_objective_state(cfg, other, Y, images)
    loss, frozen, _ = objective_loss(cfg, state, cache, Y, y, idx, 2, views, g_hand)
    grad = backward_linear(cache, loss.grad)
    for vc, vg in zip(views, loss.view_grads):
        extra = backward_linear(vc, vg)
        grad = {k: grad[k] + extra[k] for k in grad}
    analytic = np.concatenate([grad["weights"].ravel(), grad["bias"]])

    def fn(flat):
        c, vs = forward(unflatten(flat))
        return objective_loss(cfg, state, c, Y, y, idx, 2, vs, g_hand, frozen=frozen)[0].value

    flat = np.concatenate([head["weights"].ravel(), head["bias"]])
    numeric = finite_diff_grad(fn, flat, h)
    return CheckResult(f"linear:{objective}", seed, rel_error(analytic, numeric), float(np.linalg.norm(analytic)))


def run_suite(trials: int = 20, checks=CHECKS, h: float = 1e-5) -> list[CheckResult]:
    return [check_prompt(c, seed, h) for c in checks for seed in range(trials)]
