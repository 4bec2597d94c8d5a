"""Forward noising, x0 recovery, reverse steps and the eps-regression loss.

Every function accepts torch tensors shaped ``(C, H, W)`` or batched
``(B, C, H, W)``. ``t`` is a python int or, for batches, a length-B integer
tensor/array of 1-based timesteps.
"""

from __future__ import annotations

import numpy as np
import torch

from .schedule import NoiseSchedule


def _coef(s: NoiseSchedule, name: str, t, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    vals = s.at(name, t)
    c = torch.as_tensor(np.asarray(vals), dtype=like.dtype, device=like.device)
    if c.ndim == 1:
        if like.ndim < 2 or like.shape[0] != c.shape[0]:
            raise ValueError(f"got {c.shape[0]} timesteps for a tensor of shape {tuple(like.shape)}")
        c = c.reshape(-1, *([1] * (like.ndim - 1)))
    return c


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _same_shape(x0, eps, "q_sample")
    return _coef(s, "sqrt_alpha_bar", t, x0) * x0 + _coef(s, "sqrt_one_minus_alpha_bar", t, x0) * eps


def predict_x0_from_eps(xt: torch.Tensor, t, eps_hat: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    _same_shape(xt, eps_hat, "predict_x0_from_eps")
    return (xt - _coef(s, "sqrt_one_minus_alpha_bar", t, xt) * eps_hat) / _coef(s, "sqrt_alpha_bar", t, xt)


def reverse_step(
    xt: torch.Tensor,
    t,
    eps_hat: torch.Tensor,
    z: torch.Tensor,
    s: NoiseSchedule,
    clip: bool = True,
) -> torch.Tensor:
    """Draw x_{t-1} from the fixed-variance reverse kernel.

    The x0 estimate is clamped to [-1, 1] before forming the posterior mean
    unless ``clip`` is false. ``z`` is ignored where ``t == 1``.
    """
    _same_shape(xt, eps_hat, "reverse_step")
    _same_shape(xt, z, "reverse_step")
    x0_hat = predict_x0_from_eps(xt, t, eps_hat, s)
    if clip:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
    mean = _coef(s, "posterior_mean_coef_x0", t, xt) * x0_hat + _coef(s, "posterior_mean_coef_xt", t, xt) * xt
    # posterior_variance is exactly 0 at t == 1, which drops z there
    std = _coef(s, "posterior_variance", t, xt).sqrt()
    return mean + std * z


def training_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    _same_shape(eps, eps_hat, "training_loss")
    return (eps - eps_hat).pow(2).mean()
