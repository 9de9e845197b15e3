"""Noise predictors epsilon_phi(x_t, y, t).

Two implementations share one capability interface: a closed-form Bayes
optimal predictor for Gaussian data (exact oracle for tests) and the
trainable toy network, which additionally exposes attention features and
their vector-Jacobian product.
"""

import math
from abc import ABC, abstractmethod
from typing import Dict, Mapping, Optional, Tuple

import torch

from steermusic.diffusion import NoiseSchedule
from steermusic.errors import (InvalidArgumentError, InvalidStateError, MissingConditionError,
                               UnsupportedCapabilityError)
from steermusic.network import DenoiserParams
from steermusic.prompts import PromptCondition


class Denoiser(ABC):
    """Capability object behind every editing method."""

    supports_features = False

    @abstractmethod
    def predict_noise(self, x_t: torch.Tensor, cond: PromptCondition, t: int) -> torch.Tensor:
        """epsilon prediction for a single (T, F) input."""

    @abstractmethod
    def knows(self, cond: PromptCondition) -> bool:
        """Whether this model can condition on ``cond``."""

    def require_known(self, cond: PromptCondition) -> None:
        if not self.knows(cond):
            raise InvalidStateError(f'{type(self).__name__} does not know prompt {sorted(cond.tokens)}')

    def predict_with_features(self, x_t: torch.Tensor, cond: PromptCondition,
                              t: int) -> Tuple[torch.Tensor, torch.Tensor]:
        raise UnsupportedCapabilityError(f'{type(self).__name__} does not expose features')

    def feature_pullback(self, x_t: torch.Tensor, cond: PromptCondition, t: int,
                         cotangents: torch.Tensor) -> torch.Tensor:
        raise UnsupportedCapabilityError(f'{type(self).__name__} does not support feature pullback')


def analytic_predict_noise(mu_by_condition: Mapping[PromptCondition, torch.Tensor], s2: float,
                           x_t: torch.Tensor, cond: PromptCondition, t: int,
                           sched: NoiseSchedule) -> torch.Tensor:
    """Bayes-optimal epsilon for per-condition Gaussian data N(mu_y, s2 I).

    eps* = (x_t - sqrt(a) m) / sqrt(1 - a), where m is the posterior mean
    (sqrt(a) s2 x_t + (1 - a) mu_y) / (a s2 + 1 - a).
    """
    if s2 < 0:
        raise InvalidArgumentError('s2 must be >= 0')
    if t < 1:
        raise InvalidArgumentError('the analytic predictor needs t >= 1')
    try:
        mu = mu_by_condition[cond]
    except KeyError:
        raise MissingConditionError(f'no data mean registered for prompt {sorted(cond.tokens) or "null"}')
    if mu.shape != x_t.shape:
        raise InvalidArgumentError(f'mean shape {tuple(mu.shape)} does not match input {tuple(x_t.shape)}')

    a = sched.alpha_bar_at(t)
    if s2 == 0:
        return (x_t - math.sqrt(a) * mu) / math.sqrt(1.0 - a)
    m = (math.sqrt(a) * s2 * x_t + (1.0 - a) * mu) / (a * s2 + 1.0 - a)
    return (x_t - math.sqrt(a) * m) / math.sqrt(1.0 - a)


class AnalyticDenoiser(Denoiser):
    """Closed-form oracle; its features are not available."""

    def __init__(self, sched: NoiseSchedule, means: Mapping[PromptCondition, torch.Tensor],
                 s2: float = 0.0):
        self.sched = sched
        self.means: Dict[PromptCondition, torch.Tensor] = dict(means)
        self.s2 = s2

    def predict_noise(self, x_t: torch.Tensor, cond: PromptCondition, t: int) -> torch.Tensor:
        return analytic_predict_noise(self.means, self.s2, x_t, cond, t, self.sched)

    def knows(self, cond: PromptCondition) -> bool:
        return cond in self.means


def _timesteps(t: int, batch: int) -> torch.Tensor:
    return torch.full((batch,), t, dtype=torch.long)


def _check_input(params: DenoiserParams, x_t: torch.Tensor) -> None:
    arch = params.architecture
    if tuple(x_t.shape) != (arch.frames, arch.bins):
        raise InvalidArgumentError(
            f'input shape {tuple(x_t.shape)} does not match architecture ({arch.frames}, {arch.bins})')


def toy_predict_noise(params: DenoiserParams, x_t: torch.Tensor, cond: PromptCondition, t: int,
                      overrides: Optional[Dict[int, torch.Tensor]] = None
                      ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Forward pass on one (T, F) input; returns (eps_hat, features (T_l, F_l, C_l))."""
    _check_input(params, x_t)
    if not params.knows(cond):
        raise InvalidStateError(f'prompt {sorted(cond.tokens)} uses unregistered tokens')
    eps, features = params.network(x_t[None], [cond.token_ids()], _timesteps(t, 1), overrides)
    return eps[0], features[0]


def feature_pullback(params: DenoiserParams, x_t: torch.Tensor, cond: PromptCondition, t: int,
                     cotangents: torch.Tensor,
                     overrides: Optional[Dict[int, torch.Tensor]] = None) -> torch.Tensor:
    """Vector-Jacobian product d<features(x_t), cotangents>/dx_t."""
    arch = params.architecture
    if tuple(cotangents.shape) != arch.feature_shape:
        raise InvalidArgumentError(
            f'cotangent shape {tuple(cotangents.shape)} does not match features {arch.feature_shape}')
    with torch.enable_grad():
        x = x_t.detach().clone().requires_grad_(True)
        _, features = toy_predict_noise(params, x, cond, t, overrides)
        (grad,) = torch.autograd.grad(features, x, grad_outputs=cotangents)
    return grad.detach()


class ToyDenoiser(Denoiser):
    """Adapter exposing DenoiserParams through the Denoiser interface.

    ``overrides`` replaces embedding rows at lookup time, which is how a
    textual-inversion embedding is used without touching the weights.
    """

    supports_features = True

    def __init__(self, params: DenoiserParams, overrides: Optional[Dict[int, torch.Tensor]] = None):
        self.params = params
        self.overrides = dict(overrides) if overrides else None

    def predict_noise(self, x_t: torch.Tensor, cond: PromptCondition, t: int) -> torch.Tensor:
        with torch.no_grad():
            eps, _ = toy_predict_noise(self.params, x_t, cond, t, self.overrides)
        return eps

    def predict_with_features(self, x_t: torch.Tensor, cond: PromptCondition,
                              t: int) -> Tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            return toy_predict_noise(self.params, x_t, cond, t, self.overrides)

    def feature_pullback(self, x_t: torch.Tensor, cond: PromptCondition, t: int,
                         cotangents: torch.Tensor) -> torch.Tensor:
        return feature_pullback(self.params, x_t, cond, t, cotangents, self.overrides)

    def knows(self, cond: PromptCondition) -> bool:
        return self.params.knows(cond)
