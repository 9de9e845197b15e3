"""Noise schedules, forward diffusion, DDIM sampling/inversion and guidance.

All functions are pure: tensors in, tensors out, with randomness supplied
explicitly by the caller. Tensors are float64 throughout.
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional

import torch

from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.prompts import PromptCondition

if TYPE_CHECKING:
    from steermusic.denoiser import Denoiser

logger = logging.getLogger(__name__)

DTYPE = torch.float64

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 2e-2
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients and DDIM stochasticity over T steps.

    Attributes:
        num_steps: Number of diffusion steps T.
        alpha_bar: T+1 values with alpha_bar[0] == 1, strictly decreasing.
        sigma: T values; sigma[t - 1] is the DDIM noise scale of step t.
        kind: Schedule family the coefficients came from.
    """

    num_steps: int
    alpha_bar: torch.Tensor
    sigma: torch.Tensor
    kind: str = 'linear'

    def __post_init__(self):
        if self.num_steps < 1:
            raise InvalidArgumentError('num_steps must be >= 1')
        if self.alpha_bar.shape != (self.num_steps + 1,):
            raise InvalidArgumentError('alpha_bar must have T + 1 entries')
        if self.sigma.shape != (self.num_steps,):
            raise InvalidArgumentError('sigma must have T entries')
        if self.alpha_bar[0].item() != 1.0:
            raise InvalidArgumentError('alpha_bar[0] must be 1')
        if not bool(torch.all(self.alpha_bar[1:] < self.alpha_bar[:-1])):
            raise InvalidArgumentError('alpha_bar must be strictly decreasing')
        if self.alpha_bar[-1].item() <= 0.0:
            raise InvalidArgumentError('alpha_bar[T] must be positive')
        if bool(torch.any(self.sigma < 0)):
            raise InvalidArgumentError('sigma must be nonnegative')

    @property
    def deterministic(self) -> bool:
        return bool(torch.all(self.sigma == 0))

    def alpha_bar_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha_bar[t])

    def sigma_at(self, t: int) -> float:
        if t == 0:
            return 0.0
        self.check_timestep(t)
        return float(self.sigma[t - 1])

    def check_timestep(self, t: int) -> None:
        if not 0 <= t <= self.num_steps:
            raise InvalidArgumentError(f'timestep {t} outside [0, {self.num_steps}]')


def make_schedule(num_steps: int = 1000, kind: str = 'linear', eta: float = 0.0) -> NoiseSchedule:
    """Build a DDPM noise schedule.

    Args:
        num_steps: Number of diffusion steps T (>= 1).
        kind: ``'linear'`` (beta linearly spaced in [1e-4, 2e-2]) or
            ``'cosine'`` (squared-cosine alpha_bar, beta clipped at 0.999).
        eta: DDIM stochasticity; 0 gives the deterministic, inversion-capable
            schedule.

    Returns:
        A validated NoiseSchedule.
    """
    if num_steps < 1:
        raise InvalidArgumentError('num_steps must be >= 1')
    if eta < 0:
        raise InvalidArgumentError('eta must be >= 0')

    if kind == 'linear':
        betas = torch.linspace(LINEAR_BETA_START, LINEAR_BETA_END, num_steps, dtype=DTYPE)
    elif kind == 'cosine':
        steps = torch.arange(num_steps + 1, dtype=DTYPE)
        f = torch.cos((steps / num_steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        betas = torch.clamp(1 - f[1:] / f[:-1], max=MAX_BETA)
    else:
        raise InvalidArgumentError(f"unknown schedule kind '{kind}'")

    alpha_bar = torch.cat([torch.ones(1, dtype=DTYPE), torch.cumprod(1 - betas, dim=0)])

    if eta > 0:
        prev = alpha_bar[:-1]
        cur = alpha_bar[1:]
        sigma = eta * torch.sqrt((1 - prev) / (1 - cur)) * torch.sqrt(1 - cur / prev)
    else:
        sigma = torch.zeros(num_steps, dtype=DTYPE)

    return NoiseSchedule(num_steps, alpha_bar, sigma, kind)


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance scale and whether source branches use it."""

    omega: float = 1.0
    apply_to_source: bool = True

    def __post_init__(self):
        if not math.isfinite(self.omega):
            raise InvalidArgumentError('omega must be finite')
        if self.omega < 0:
            raise InvalidArgumentError('omega must be >= 0')

    @property
    def source_omega(self) -> float:
        return self.omega if self.apply_to_source else 1.0


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f'{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}')


def forward_diffuse(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample q(x_t | x_0) with the given noise: sqrt(a) x0 + sqrt(1 - a) eps."""
    _check_same_shape(x0, eps, 'forward_diffuse')
    a = sched.alpha_bar_at(t)
    if t == 0:
        return x0.clone()
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, omega: float) -> torch.Tensor:
    """Classifier-free guidance: omega * cond + (1 - omega) * uncond."""
    _check_same_shape(eps_cond, eps_uncond, 'cfg_combine')
    if omega == 1.0:
        return eps_cond.clone()
    return omega * eps_cond + (1.0 - omega) * eps_uncond


def guided_noise(denoiser: 'Denoiser', x_t: torch.Tensor, cond: PromptCondition, t: int,
                 omega: float) -> torch.Tensor:
    """Guided noise prediction; the unconditional pass is skipped at omega == 1."""
    eps_cond = denoiser.predict_noise(x_t, cond, t)
    if omega == 1.0 or cond.is_null:
        return eps_cond
    eps_uncond = denoiser.predict_noise(x_t, PromptCondition.null(), t)
    return cfg_combine(eps_cond, eps_uncond, omega)


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One reverse DDIM update from t to t_prev (t > t_prev)."""
    _check_same_shape(x_t, eps_hat, 'ddim_step')
    if t <= t_prev:
        raise InvalidArgumentError(f'ddim_step needs t > t_prev, got {t} <= {t_prev}')
    if t_prev < 0:
        raise InvalidArgumentError('t_prev must be >= 0')
    a_t = sched.alpha_bar_at(t)
    a_prev = sched.alpha_bar_at(t_prev)
    sigma = sched.sigma_at(t)
    if sigma > 0 and noise is None:
        raise InvalidArgumentError(f'sigma[{t}] > 0 requires a noise sample')

    x0_hat = (x_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    direction = math.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0))
    x_prev = math.sqrt(a_prev) * x0_hat + direction * eps_hat
    if sigma > 0:
        _check_same_shape(x_t, noise, 'ddim_step noise')
        x_prev = x_prev + sigma * noise
    return x_prev


def timestep_grid(t_end: int, steps: int) -> List[int]:
    """Rounded uniform grid 0 = t_0 < t_1 < ... < t_steps = t_end."""
    if steps < 0:
        raise InvalidArgumentError('steps must be >= 0')
    if steps == 0:
        return [0]
    if t_end < steps:
        raise InvalidArgumentError(f'cannot fit {steps} steps into {t_end} timesteps')
    return [round(i * t_end / steps) for i in range(steps + 1)]


def ddim_invert(x0: torch.Tensor, cond: PromptCondition, denoiser: 'Denoiser', steps: int,
                omega: float, sched: NoiseSchedule, t_end: Optional[int] = None) -> torch.Tensor:
    """Deterministic DDIM inversion from x_0 up to t_end in ``steps`` updates.

    The step t -> t_next uses the prediction at (x_t, t_next); the model is
    never evaluated at t = 0.
    """
    if not sched.deterministic:
        raise InvalidStateError('DDIM inversion requires a deterministic schedule (sigma == 0)')
    t_end = sched.num_steps if t_end is None else t_end
    sched.check_timestep(t_end)
    grid = timestep_grid(t_end, steps)

    x = x0.clone()
    for t, t_next in zip(grid[:-1], grid[1:]):
        eps_hat = guided_noise(denoiser, x, cond, t_next, omega)
        a_t = sched.alpha_bar_at(t)
        a_next = sched.alpha_bar_at(t_next)
        x0_hat = (x - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
        x = math.sqrt(a_next) * x0_hat + math.sqrt(1.0 - a_next) * eps_hat
    return x


def ddim_sample(x_t: torch.Tensor, cond: PromptCondition, denoiser: 'Denoiser', steps: int,
                omega: float, sched: NoiseSchedule, t_start: Optional[int] = None,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Iterate ddim_step from t_start down to 0 with guided predictions.

    A generator is only needed when the schedule is stochastic.
    """
    t_start = sched.num_steps if t_start is None else t_start
    sched.check_timestep(t_start)
    grid = timestep_grid(t_start, steps)
    if not sched.deterministic and generator is None:
        raise InvalidArgumentError('a stochastic schedule needs a generator for ddim_sample')

    x = x_t.clone()
    for t, t_prev in zip(reversed(grid[1:]), reversed(grid[:-1])):
        eps_hat = guided_noise(denoiser, x, cond, t, omega)
        noise = None
        if sched.sigma_at(t) > 0:
            noise = torch.randn(x.shape, generator=generator, dtype=DTYPE)
        x = ddim_step(x, eps_hat, t, t_prev, sched, noise)
    return x
