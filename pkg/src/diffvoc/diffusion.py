"""Forward corruption, continuous noise-level draws and the ancestral reverse sampler.

The closed-form marginal is q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I);
the noise variance is the scalar (1 - abar_t) times the identity.

All random draws come from a numpy ``Generator`` so that a run's random
stream can be checkpointed and restored exactly.
"""

from __future__ import annotations

import contextlib
import enum
import math

import numpy as np
import torch

from .errors import ContractError, NumericalError
from .noise_model import DTYPE
from .schedules import AlphaBarCurve, InferenceSchedule, alpha_bar_infer


class SigmaMode(enum.Enum):
    POSTERIOR = "posterior"  # (1 - abar_prev) / (1 - abar_n) * beta_n
    BETA = "beta"  # beta_n


def forward_sample(x0: torch.Tensor, alpha_bar_t, eps: torch.Tensor) -> torch.Tensor:
    """sqrt(abar) * x0 + sqrt(1 - abar) * eps; ``alpha_bar_t`` may be a float or broadcastable tensor."""
    if x0.shape != eps.shape:
        raise ContractError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    a = torch.as_tensor(alpha_bar_t, dtype=x0.dtype)
    if torch.any(a <= 0) or torch.any(a > 1):
        raise ContractError("alpha_bar_t must lie in (0, 1]")
    return torch.sqrt(a) * x0 + torch.sqrt(1 - a) * eps


def sample_continuous_level(curve: AlphaBarCurve, rng, size=None):
    """Draw sqrt(abar) uniformly inside a uniformly chosen discrete segment.

    A segment s in 1..T is picked uniformly, then sqrt(abar) is uniform on
    [sqrt(abar_s), sqrt(abar_{s-1})]. Returns ``(sqrt_abar, sqrt_one_minus_abar)``
    as floats, or arrays when ``size`` is given.
    """
    values = np.asarray(curve.values)
    s = rng.integers(1, curve.T + 1, size=size)
    lo, hi = np.sqrt(values[s]), np.sqrt(values[s - 1])
    level = rng.uniform(lo, hi)
    comp = np.sqrt(1.0 - level**2)
    if size is None:
        return float(level), float(comp)
    return level, comp


def _check_finite(t: torch.Tensor, what: str, step) -> None:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite {what} at reverse step {step}", step=step)


def reverse_step(
    x_n: torch.Tensor,
    eps_hat: torch.Tensor,
    beta_hat_n: float,
    abar_n: float,
    abar_prev: float,
    z: torch.Tensor | None,
    sigma_mode: SigmaMode = SigmaMode.POSTERIOR,
    add_noise: bool = True,
    step: int | None = None,
) -> torch.Tensor:
    """One ancestral step: mu = (x_n - beta/sqrt(1-abar_n) * eps_hat) / sqrt(1-beta), plus sigma*z."""
    if x_n.shape != eps_hat.shape or (add_noise and z is not None and z.shape != x_n.shape):
        raise ContractError("x_n, eps_hat and z must share a shape")
    if not (0 < beta_hat_n < 1) or not abar_n < abar_prev:
        raise ContractError(f"invalid step constants beta={beta_hat_n}, abar={abar_n}, abar_prev={abar_prev}")
    if not math.isclose(abar_n, abar_prev * (1 - beta_hat_n), rel_tol=1e-9):
        raise ContractError("abar_n must equal abar_prev * (1 - beta_hat_n)")
    _check_finite(x_n, "state", step)
    _check_finite(eps_hat, "noise estimate", step)
    mu = (x_n - (beta_hat_n / math.sqrt(1 - abar_n)) * eps_hat) / math.sqrt(1 - beta_hat_n)
    if not add_noise:
        return mu
    if z is None:
        raise ContractError("add_noise requires z")
    if sigma_mode is SigmaMode.POSTERIOR:
        var = (1 - abar_prev) / (1 - abar_n) * beta_hat_n
    else:
        var = beta_hat_n
    return mu + math.sqrt(var) * z


def draw_reverse_noise(rng, n_steps: int, shape) -> np.ndarray:
    """Prior draw x_N followed by injection noises for steps N..2; shape (n_steps, *shape)."""
    return rng.standard_normal((n_steps, *shape))


def generate(
    predictor,
    mel: torch.Tensor,
    infer: InferenceSchedule,
    rng=None,
    differentiable: bool = False,
    sigma_mode: SigmaMode = SigmaMode.POSTERIOR,
    inject_noise: bool = True,
    noise: torch.Tensor | np.ndarray | None = None,
) -> torch.Tensor:
    """Run the N-step reverse chain from standard normal noise.

    ``mel`` is ``(B, frames, n_mels)`` (or unbatched). Noise is either drawn
    from ``rng`` or supplied via ``noise`` with shape ``(B, N, L)`` (or
    ``(N, L)``): index 0 is the prior sample, index ``N - n + 1`` the injection
    noise of step n (n >= 2). With ``differentiable`` the graph is kept so gradients
    reach the predictor parameters; the values are identical either way.
    """
    squeeze = mel.dim() == 2
    if squeeze:
        mel = mel[None]
    B, frames = mel.shape[0], mel.shape[1]
    L = frames * predictor.hop_length
    N = infer.N
    if noise is None:
        if rng is None:
            raise ContractError("generate needs rng or noise")
        noise = draw_reverse_noise(rng, N, (B, L)).swapaxes(0, 1)
    noise = torch.as_tensor(noise, dtype=DTYPE)
    if squeeze and noise.dim() == 2:
        noise = noise[None]
    if noise.shape != (B, N, L):
        raise ContractError(f"noise must have shape {(B, N, L)}, got {tuple(noise.shape)}")

    abar = alpha_bar_infer(infer)
    ctx = contextlib.nullcontext() if differentiable else torch.no_grad()
    with ctx:
        x = noise[:, 0]
        for n in range(N, 0, -1):
            eps_hat = predictor(x, mel, math.sqrt(abar[n]))
            last = n == 1
            x = reverse_step(
                x,
                eps_hat,
                infer.betas_hat[n - 1],
                abar[n],
                abar[n - 1],
                None if last else noise[:, N - n + 1],
                sigma_mode,
                add_noise=inject_noise and not last,
                step=n,
            )
        _check_finite(x, "output", 0)
    return x[0] if squeeze else x
