"""Training targets and losses for instantaneous and average velocity fields.

A batch interpolates data toward noise along straight paths, x_t = (1-t)x + t*eps
with conditional velocity v_t = eps - x. The instantaneous loss regresses the
model at (x_t, t, t) onto v_t. The mean-velocity loss regresses the model at
(x_t, r, t) onto a bootstrapped target built from its own time derivative
(one forward-mode pass, tangent (v_t, 0, 1)) and a guidance mix of conditional
and unconditional predictions; everything entering the target is detached, so
the prediction pass is the only differentiated evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, value_of


@dataclass(frozen=True)
class TimestepConfig:
    mu: float = 0.4
    sigma: float = 1.0
    mixup_ratio: float = 0.75

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("timestep.sigma must be positive")
        if not 0.0 <= self.mixup_ratio <= 1.0:
            raise ValueError("timestep.mixup_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 0.3
    kappa: float = 0.9
    drop_prob: float = 0.1

    def __post_init__(self):
        if self.kappa >= 1.0:
            raise ValueError("guidance.kappa must be < 1")
        if not np.isfinite(self.omega / (1.0 - self.kappa)):
            raise ValueError("guidance effective scale is not finite")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("guidance.drop_prob must lie in [0, 1]")

    @property
    def effective_scale(self) -> float:
        # evaluated in exact rational arithmetic so human-entered decimals
        # like (0.3, 0.9) report 3.0 rather than 3.0000000000000004
        return float(Fraction(repr(self.omega)) / (1 - Fraction(repr(self.kappa))))

    @property
    def unguided(self) -> bool:
        return self.omega == 1.0 and self.kappa == 0.0


UNGUIDED = GuidanceConfig(omega=1.0, kappa=0.0, drop_prob=0.0)


@dataclass
class FlowBatch:
    """One training minibatch; all tensors share dtype, cond is post-dropout."""

    x: Tensor          # [B, L, D] data
    eps: Tensor        # [B, L, D] prior draw
    x_t: Tensor        # [B, L, D] interpolant
    v_t: Tensor        # [B, L, D] conditional velocity
    t: Tensor          # [B]
    r: Tensor          # [B], r <= t
    cond: np.ndarray   # [B] int labels, null row where dropped
    dropped: np.ndarray  # [B] bool

    def __post_init__(self):
        b = self.x.shape[0]
        if not (self.x.shape == self.eps.shape == self.x_t.shape == self.v_t.shape):
            raise ValueError("batch array shapes disagree")
        if self.t.shape != (b,) or self.r.shape != (b,):
            raise ValueError("t and r must be [B]")
        rv, tv = self.r.numpy(), self.t.numpy()
        if np.any(rv > tv) or np.any(rv < 0) or np.any(tv > 1):
            raise ValueError("times must satisfy 0 <= r <= t <= 1")
        if self.cond.shape != (b,) or self.dropped.shape != (b,):
            raise ValueError("cond and dropped must be [B]")


def sample_timesteps(batch_size: int, cfg: TimestepConfig, rng: np.random.Generator, dtype=np.float64):
    """Draw (t, r) pairs: two logit-normal draws, larger to t, then mix-up.

    With probability mixup_ratio the pair collapses to r = t. Values are kept
    strictly inside (0, 1) after the cast to `dtype`.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    z = rng.normal(cfg.mu, cfg.sigma, size=(batch_size, 2))
    draws = 1.0 / (1.0 + np.exp(-z))
    t = draws.max(axis=1)
    r = draws.min(axis=1)
    collapse = rng.uniform(size=batch_size) < cfg.mixup_ratio
    r = np.where(collapse, t, r)
    tiny = 1e-6 if np.dtype(dtype) == np.float32 else 1e-12
    t = np.clip(t.astype(dtype), tiny, 1.0 - tiny)
    r = np.clip(r.astype(dtype), tiny, 1.0 - tiny)
    return Tensor(t), Tensor(r)


def interpolate(x, eps, t):
    """Straight-path interpolant and its velocity: ((1-t)x + t*eps, eps - x)."""
    xv, ev = value_of(x), value_of(eps)
    if xv.shape != ev.shape:
        raise ValueError("x and eps must share a shape")
    tv = np.asarray(value_of(t), dtype=xv.dtype)
    if np.any(tv < 0) or np.any(tv > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = tv.reshape((-1,) + (1,) * (xv.ndim - 1)) if tv.ndim == 1 else tv
    x_t = (1.0 - tb) * xv + tb * ev
    v_t = ev - xv
    return Tensor(x_t), Tensor(v_t)


def drop_conditions(cond: np.ndarray, drop_prob: float, rng: np.random.Generator, null_label: int):
    """Independently replace labels with the null row; report which ones."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError("drop_prob must lie in [0, 1]")
    cond = np.asarray(cond)
    dropped = rng.uniform(size=cond.shape[0]) < drop_prob
    out = np.where(dropped, null_label, cond)
    return out, dropped


def make_flow_batch(
    x: np.ndarray,
    labels: np.ndarray,
    t_cfg: TimestepConfig,
    g_cfg: GuidanceConfig,
    rng: np.random.Generator,
    null_label: int,
    dtype=np.float32,
    force_r_equals_t: bool = False,
) -> FlowBatch:
    """Assemble a batch; rng is consumed in a fixed order (times, eps, drops)."""
    x = np.asarray(x, dtype=dtype)
    b = x.shape[0]
    t, r = sample_timesteps(b, t_cfg, rng, dtype=dtype)
    if force_r_equals_t:
        r = t
    eps = rng.standard_normal(x.shape).astype(dtype)
    x_t, v_t = interpolate(x, eps, t)
    cond, dropped = drop_conditions(labels, g_cfg.drop_prob, rng, null_label)
    return FlowBatch(Tensor(x), Tensor(eps), x_t, v_t, t, r, cond, dropped)


def cfm_loss(model_fn, params, batch: FlowBatch):
    """Mean squared error of the model at (x_t, t, t) against v_t."""
    pred = model_fn(params, batch.x_t, batch.t, batch.t, batch.cond)
    return ad.mean(ad.square(pred - batch.v_t))


def guided_velocity(v_t, f_cond, f_uncond, g: GuidanceConfig):
    """Affine guidance mix omega*v + kappa*f_cond + (1-omega-kappa)*f_uncond."""
    w_uncond = 1.0 - g.omega - g.kappa  # coefficients sum to 1 by construction
    return v_t * g.omega + f_cond * g.kappa + f_uncond * w_uncond


def _detached(params) -> dict:
    return {k: ad.stop_gradient(v) for k, v in params.items()}


def meanflow_target(model_fn, params, batch: FlowBatch, g: GuidanceConfig, null_label: int):
    """Detached regression target v_cfg - (t - r) * d/dt f, plus the derivative.

    The derivative comes from one dual-number pass with tangent (v_t, 0, 1).
    Dropped batch elements fall back to the unguided target (their model input
    is already the null condition), so the unconditional branch keeps tracking
    the raw field. Returns (u_tgt, dudt, primal_prediction), all constants.
    """
    params = _detached(params)
    primal, dudt = ad.jvp(
        lambda xx, rr, tt: model_fn(params, xx, rr, tt, batch.cond),
        [batch.x_t, batch.r, batch.t],
        [batch.v_t, np.zeros(batch.r.shape), np.ones(batch.t.shape)],
    )

    v = batch.v_t.numpy()
    if g.unguided:
        v_cfg = v
    else:
        f_cond = value_of(model_fn(params, batch.x_t, batch.t, batch.t, batch.cond))
        null_cond = np.full(batch.cond.shape, null_label, dtype=batch.cond.dtype)
        f_uncond = value_of(model_fn(params, batch.x_t, batch.t, batch.t, null_cond))
        shape = (-1,) + (1,) * (v.ndim - 1)
        omega = np.where(batch.dropped, 1.0, g.omega).astype(v.dtype).reshape(shape)
        kappa = np.where(batch.dropped, 0.0, g.kappa).astype(v.dtype).reshape(shape)
        v_cfg = omega * v + kappa * f_cond + (1.0 - omega - kappa) * f_uncond

    gap = (batch.t.numpy() - batch.r.numpy()).reshape((-1,) + (1,) * (v.ndim - 1))
    u_tgt = v_cfg - gap * dudt.numpy()
    return Tensor(u_tgt), dudt, primal


def meanflow_loss(model_fn, params, batch: FlowBatch, g: GuidanceConfig, null_label: int):
    """Squared error between the (r, t) prediction and the detached target."""
    u_tgt, _, _ = meanflow_target(model_fn, params, batch, g, null_label)
    pred = model_fn(params, batch.x_t, batch.r, batch.t, batch.cond)
    return ad.mean(ad.square(pred - u_tgt))
