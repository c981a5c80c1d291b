"""Adam over the mixed manifold parameter set and the two-stage schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

from ..errors import NonFiniteLoss
from .config import AdamConfig, OptimConfig, StageConfig
from .losses import TERMS, breakdown, evaluate, resolve
from .problem import (
    DTYPE, ContactTerms, ParameterSet, Problem, empty_contact_terms, flatten_tangent, refresh_contacts,
    tangent_shapes, tangent_size, unflatten_tangent, zero_tangent,
)

log = logging.getLogger(__name__)


def active_masks(problem: Problem, stage: StageConfig, pin_first_camera=True):
    """Per-block 0/1 masks selecting the tangent coordinates a stage may move."""
    shapes = tangent_shapes(problem)
    on = {
        "K": stage.optimize_intrinsics,
        "P": stage.optimize_poses,
        "T": stage.optimize_body,
        "sigma": stage.optimize_scales,
        "depth": stage.optimize_depth,
    }
    masks = {k: torch.full(s, float(on[k]), dtype=DTYPE) for k, s in shapes.items()}
    if pin_first_camera and problem.n_frames:
        masks["P"][0] = 0.0
    return masks


def all_active(problem: Problem):
    return {k: torch.ones(s, dtype=DTYPE) for k, s in tangent_shapes(problem).items()}


def gradient(problem: Problem, params: ParameterSet, contacts: ContactTerms, cfg, active=None):
    """Loss values and the tangent-space gradient of the weighted total.

    Coordinates outside ``active`` get exactly zero gradient.
    """
    xi = zero_tangent(problem, requires_grad=True)
    vals = evaluate(problem, params, contacts, cfg, xi)
    total = vals["total"]
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"loss is {float(total)}", state=params)
    grads = torch.autograd.grad(total, list(xi.values()), allow_unused=True)
    out = {}
    for (name, x), g in zip(xi.items(), grads):
        g = torch.zeros_like(x) if g is None else g.detach()
        if active is not None:
            g = g * active[name]
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteLoss(f"non-finite gradient in block {name}", state=params)
        out[name] = g
    return {k: v.detach() for k, v in vals.items()}, out


def numerical_gradient(problem, params, contacts, cfg, h=1e-5, terms=("total",) + TERMS):
    """Central finite differences of each named term over every tangent coordinate.

    All perturbed states are evaluated in one vectorized batch.
    """
    n = tangent_size(problem)
    eye = torch.eye(n, dtype=DTYPE) * h
    steps = torch.cat([eye, -eye])

    def f(x):
        vals = evaluate(problem, params, contacts, cfg, unflatten_tangent(problem, x))
        return torch.stack([vals[t] for t in terms])

    with torch.no_grad():
        out = torch.func.vmap(f)(steps)
    diff = (out[:n] - out[n:]) / (2.0 * h)
    return {t: unflatten_tangent(problem, diff[:, k]) for k, t in enumerate(terms)}


def term_gradients(problem, params, contacts, cfg, terms=("total",) + TERMS):
    """Reverse-mode gradient of each named term separately."""
    out = {}
    for t in terms:
        xi = zero_tangent(problem, requires_grad=True)
        vals = evaluate(problem, params, contacts, cfg, xi)
        gs = torch.autograd.grad(vals[t], list(xi.values()), allow_unused=True)
        out[t] = {k: (torch.zeros_like(x) if g is None else g) for (k, x), g in zip(xi.items(), gs)}
    return out


def apply_tangent(problem: Problem, params: ParameterSet, delta) -> ParameterSet:
    """Move ``params`` along tangent step ``delta`` (same map the losses differentiate)."""
    with torch.no_grad():
        p = resolve(problem, params, delta)
    return ParameterSet(
        K=p["K"], R_P=p["R_P"], t_P=p["t_P"], R_T=p["R_T"], t_T=p["t_T"],
        log_sigma=p["log_sigma"], field=p["field"],
    )


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, problem):
        return cls(zero_tangent(problem), zero_tangent(problem), 0)


def adam_step(problem: Problem, params: ParameterSet, state: AdamState, grad, lr, cfg: AdamConfig = AdamConfig()):
    """One bias-corrected Adam step in tangent coordinates, then retraction."""
    k = state.step + 1
    m, v, delta = {}, {}, {}
    for name, g in grad.items():
        m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m[name] / (1.0 - cfg.beta1**k)
        v_hat = v[name] / (1.0 - cfg.beta2**k)
        delta[name] = -lr * m_hat / (torch.sqrt(v_hat) + cfg.eps)
    return apply_tangent(problem, params, delta), AdamState(m, v, k)


@dataclass
class StageResult:
    params: ParameterSet
    initial_loss: float
    final_loss: float
    best_iteration: int
    contacts: ContactTerms


@dataclass
class OptimResult:
    params: ParameterSet
    history: list = field(default_factory=list)
    stages: list = field(default_factory=list)


def _record(vals, stage_name, iteration, lr):
    rec = {"stage": stage_name, "iteration": iteration, "lr": lr}
    b = breakdown(vals)
    rec["total"] = b["total"]
    for t in TERMS:
        rec[t] = b[t]
    for t in ("lc1_person", "lc2_person", "lp_person"):
        rec[t] = b[t]
    return rec


def run_stage(problem: Problem, params: ParameterSet, contacts: ContactTerms, loss_cfg, stage: StageConfig,
              adam: AdamConfig = AdamConfig(), pin_first_camera=True, keep_best=True, stage_name="stage",
              history=None):
    """Adam iterations of one stage; returns the best (or last) iterate."""
    active = active_masks(problem, stage, pin_first_camera)
    state = AdamState.zeros(problem)
    best, best_loss, best_it = params, None, 0
    initial = None
    current = params
    for k in range(stage.iterations + 1):
        try:
            vals, g = gradient(problem, current, contacts, loss_cfg, active)
        except NonFiniteLoss as err:
            err.state = best
            raise
        loss = float(vals["total"])
        if initial is None:
            initial = loss
        lr = stage.learning_rate_at(k) if k < stage.iterations else 0.0
        if history is not None:
            history.append(_record(vals, stage_name, k, lr))
        if best_loss is None or loss < best_loss:
            best, best_loss, best_it = current, loss, k
        if k == stage.iterations:
            break
        current, state = adam_step(problem, current, state, g, lr, adam)
    final = best if keep_best else current
    final_loss = best_loss if keep_best else loss
    return StageResult(final, initial, final_loss, best_it if keep_best else stage.iterations, contacts)


def run_two_stage(problem: Problem, params: ParameterSet, cfg: OptimConfig = OptimConfig(), seed=0,
                  stage1: StageConfig | None = None, stage2: StageConfig | None = None, use_contacts=True):
    """Coarse 3D alignment followed by reprojection refinement.

    Contact correspondences are recomputed from the current estimate at the
    start of each stage. The procedure is deterministic; ``seed`` only fixes
    torch's global generator for callers that add stochastic pieces.
    """
    torch.manual_seed(seed)
    history = []
    stages = []
    current = params
    for name, stage in (("stage1", stage1 or cfg.stage1), ("stage2", stage2 or cfg.stage2)):
        if use_contacts:
            contacts = refresh_contacts(problem, current, cfg.contact.max_px, cfg.contact.visibility_radius,
                                        cfg.contact.track_projection)
        else:
            contacts = empty_contact_terms(problem)
        loss_cfg = cfg.loss.with_weights(**stage.weights)
        res = run_stage(problem, current, contacts, loss_cfg, stage, cfg.adam, cfg.pin_first_camera,
                        cfg.keep_best, name, history)
        log.info("%s: loss %.6g -> %.6g (%d links, %d persistent)", name, res.initial_loss, res.final_loss,
                 contacts.n_links, contacts.n_persistent)
        stages.append(res)
        current = res.params
    return OptimResult(current, history, stages)


def tangent_norm(problem, grad):
    return float(torch.linalg.norm(flatten_tangent(problem, grad)))


__all__ = [
    "AdamState", "OptimResult", "StageResult", "active_masks", "adam_step", "all_active", "apply_tangent",
    "gradient", "numerical_gradient", "run_stage", "run_two_stage", "tangent_norm", "term_gradients",
]
