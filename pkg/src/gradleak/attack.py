"""Gradient inversion by Adam over the input image."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import AttackFailedError, ContractError, DegenerateGradientError
from .gradmatch import (
    GradLossKind,
    GradTarget,
    ImageShape,
    attack_objective_grad,
    gm_loss_batch,
    gradient_map,
)
from .smallnet import Sample
from .tensorcore import SeededRng, as_vector

log = logging.getLogger(__name__)

__all__ = [
    "AttackConfig",
    "AdamState",
    "AttackResult",
    "BoundCheckRecord",
    "adam_step",
    "initial_image",
    "run_attack",
    "bound_check_one_step",
]

INIT_MODES = ("uniform", "local")


@dataclass(frozen=True)
class AttackConfig:
    """Optimizer settings for one attack kind.

    ``init_mode`` is ``"uniform"`` (random image in [0, 1]) or ``"local"``
    (ground truth plus ``perturb * sign(N(0, 1))``, clamped).
    """

    kind: GradLossKind = GradLossKind.L2
    steps: int = 500
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha_tv: float = 1e-2
    restarts: int = 3
    init_mode: str = "uniform"
    perturb: float = 0.1
    fd_step: float = 1e-4
    tv_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", GradLossKind.parse(self.kind))
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.restarts < 1:
            raise ContractError("restarts must be >= 1")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.adam_eps <= 0 or self.fd_step <= 0:
            raise ContractError("adam_eps and fd_step must be positive")
        if self.alpha_tv < 0:
            raise ContractError("alpha_tv must be non-negative")
        if self.init_mode not in INIT_MODES:
            raise ContractError(f"init_mode must be one of {INIT_MODES}")
        if self.perturb < 0:
            raise ContractError("perturb magnitude must be non-negative")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "AdamState":
        return cls(np.zeros(d), np.zeros(d))


def adam_step(state: AdamState, x, grad, cfg: AttackConfig, t: int):
    """One bias-corrected Adam update followed by projection onto [0, 1]."""
    if t < 1:
        raise ContractError("Adam step index starts at 1")
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    x_new = np.clip(x - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), 0.0, 1.0)
    return AdamState(m, v), x_new


@dataclass
class AttackResult:
    x_rec: np.ndarray = field(repr=False)
    final_gm_loss: float
    initial_gm_loss: float
    loss_trajectory: list = field(repr=False)
    per_restart_final: list
    chosen_restart: int
    wall_time: float
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {
            "final_gm_loss": self.final_gm_loss,
            "initial_gm_loss": self.initial_gm_loss,
            "per_restart_final": list(self.per_restart_final),
            "chosen_restart": self.chosen_restart,
            "steps": len(self.loss_trajectory),
            "wall_time": self.wall_time,
            "failures": list(self.failures),
            "x_rec": [float(v) for v in self.x_rec],
        }


def initial_image(cfg: AttackConfig, x_star, rng: SeededRng) -> np.ndarray:
    d = x_star.size
    if cfg.init_mode == "uniform":
        return rng.uniform(0.0, 1.0, size=d)
    return np.clip(x_star + cfg.perturb * np.sign(rng.normal(d)), 0.0, 1.0)


def _run_restart(cfg, gmap, target, x_star, shape, rng):
    x = initial_image(cfg, x_star, rng)
    state = AdamState.zeros(x.size)
    trajectory = []
    initial = None
    for t in range(1, cfg.steps + 1):
        grad, loss = attack_objective_grad(
            gmap, x, None, cfg.kind, target, cfg.alpha_tv, shape,
            cfg.fd_step, cfg.tv_eps, return_loss=True,
        )
        if initial is None:
            initial = loss
        state, x = adam_step(state, x, grad, cfg, t)
        trajectory.append(float(gm_loss_batch(cfg.kind, gmap, x[None, :], target)[0]))
    return x, initial, trajectory


def run_attack(cfg: AttackConfig, w, target: GradTarget, sample: Sample,
               shape: ImageShape, rng: SeededRng | None = None) -> AttackResult:
    """Run ``cfg.restarts`` independent reconstructions and keep the best.

    "Best" means lowest final gradient-matching loss, which is what an
    attacker can observe.  The label is taken from ``sample`` and the ground
    truth image is only read by the ``"local"`` initialization.  Restart r
    draws from ``rng.child(r)``; ``rng`` defaults to ``SeededRng(cfg.seed)``.
    """
    gmap = gradient_map(w, sample.y)
    start = time.perf_counter()
    base_rng = rng if rng is not None else SeededRng(cfg.seed)
    finals, runs, failures = [], [], []
    for r in range(cfg.restarts):
        try:
            x, initial, traj = _run_restart(cfg, gmap, target, sample.x, shape,
                                            base_rng.child(r))
        except DegenerateGradientError as exc:
            log.warning("restart %d failed: %s", r, exc)
            failures.append({"restart": r, "reason": str(exc)})
            finals.append(math.inf)
            runs.append(None)
            continue
        finals.append(traj[-1])
        runs.append((x, initial, traj))
    if all(run is None for run in runs):
        raise AttackFailedError("all restarts failed", failures)
    best = int(np.argmin(finals))
    x, initial, traj = runs[best]
    return AttackResult(
        x_rec=x,
        final_gm_loss=finals[best],
        initial_gm_loss=initial,
        loss_trajectory=traj,
        per_restart_final=finals,
        chosen_restart=best,
        wall_time=time.perf_counter() - start,
        failures=failures,
    )


@dataclass
class BoundCheckRecord:
    mu: float
    loss_before: float
    drop_observed: float
    drop_upper_bound_T2: float
    grad_sq_norm: float
    L_hat: float
    M_hat: float
    satisfied: bool | None  # None when lambda_min == 0 (bound undefined)


def bound_check_one_step(model, x, y, mu, lambda_max, lambda_min, target: GradTarget,
                         kind=GradLossKind.L2, fd_step=1e-4, tol=0.1):
    """Take one plain gradient-descent step and compare the loss drop with
    ``|grad|^2 / (4 M^2)``, where ``M = sqrt(lambda_min / 2)``.

    ``model`` is ``Weights`` (with label ``y``) or any gradient map.  The step
    is not projected onto the pixel box.
    """
    if not (lambda_max >= lambda_min >= 0):
        raise ContractError("need lambda_max >= lambda_min >= 0")
    if mu < 0:
        raise ContractError("step size must be non-negative")
    gmap = gradient_map(model, y)
    x = as_vector(x, "x")
    grad, loss0 = attack_objective_grad(gmap, x, None, kind, target, 0.0, None,
                                        fd_step, return_loss=True)
    x1 = x - mu * grad
    loss1 = float(gm_loss_batch(kind, gmap, x1[None, :], target)[0])
    gsq = float(grad @ grad)
    drop = loss0 - loss1
    L_hat = math.sqrt(lambda_max / 2.0)
    M_hat = math.sqrt(lambda_min / 2.0)
    if lambda_min == 0:
        bound, satisfied = math.inf, None
    else:
        bound = gsq / (4.0 * M_hat * M_hat)
        # absolute slack at the round-off level of the expanded L2 loss
        atol = 1e-13 * target.norm * target.norm
        satisfied = bool(drop <= bound * (1.0 + tol) + atol)
    return BoundCheckRecord(mu, loss0, drop, bound, gsq, L_hat, M_hat, satisfied)
