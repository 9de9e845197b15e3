"""Score-distillation gradients and editing loops.

Every gradient here is a plain tensor computed without differentiating
through the denoiser (stop-gradient by construction). The one exception is
the contrastive feature losses, whose input gradient is pulled back through
the target-branch feature extractor.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from steermusic.denoiser import Denoiser
from steermusic.diffusion import (DTYPE, GuidanceConfig, NoiseSchedule, ddim_invert, ddim_sample,
                                  forward_diffuse, guided_noise, timestep_grid)
from steermusic.errors import (DegenerateInputError, InvalidArgumentError, InvalidStateError,
                               UnsupportedCapabilityError)
from steermusic.prompts import PromptCondition
from steermusic.spectrogram import Spectrogram

logger = logging.getLogger(__name__)


class DistillMethod(str, Enum):
    SDS = 'sds'
    DDS = 'dds'
    DDS_PATCHNCE = 'dds_patchnce'
    PDS = 'pds'
    PDS_O = 'pds_o'
    STEERMUSIC_PLUS = 'steermusic_plus'
    DDIM_EDIT = 'ddim_edit'
    SDEDIT = 'sdedit'

    @property
    def personalized(self) -> bool:
        return self in (DistillMethod.PDS, DistillMethod.PDS_O, DistillMethod.STEERMUSIC_PLUS)

    @property
    def baseline(self) -> bool:
        return self in (DistillMethod.DDIM_EDIT, DistillMethod.SDEDIT)


# Operating points: SteerMusic runs 400 steps at CFG 30 with w(t) doubled,
# SteerMusic+ 400 steps at CFG 15 with lambda 0.05.
_METHOD_DEFAULTS = {
    DistillMethod.SDS: dict(steps=400, omega=30.0, grad_scale=2.0, lam=0.0),
    DistillMethod.DDS: dict(steps=400, omega=30.0, grad_scale=2.0, lam=0.0),
    DistillMethod.DDS_PATCHNCE: dict(steps=400, omega=30.0, grad_scale=2.0, lam=0.0),
    DistillMethod.PDS: dict(steps=400, omega=15.0, grad_scale=1.0, lam=0.0),
    DistillMethod.PDS_O: dict(steps=400, omega=15.0, grad_scale=1.0, lam=0.05),
    DistillMethod.STEERMUSIC_PLUS: dict(steps=400, omega=15.0, grad_scale=1.0, lam=0.05),
    DistillMethod.DDIM_EDIT: dict(steps=50, omega=7.5, grad_scale=1.0, lam=0.0),
    DistillMethod.SDEDIT: dict(steps=50, omega=7.5, grad_scale=1.0, lam=0.0),
}

W_KINDS = ('constant', 'one_minus_alpha_bar')


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of one editing run.

    ``steps`` is the number of optimisation iterations K for the
    distillation methods and the number of DDIM steps for the baselines.
    ``lam`` is the shift-regularization weight and ``gamma`` the weight of
    the contrastive feature term.
    The baselines run on the base model; ``baseline_on_pdm`` switches them
    to the personalized one.
    """

    method: DistillMethod = DistillMethod.DDS
    steps: int = 400
    lr: float = 0.1
    grad_scale: float = 2.0
    omega: float = 30.0
    lam: float = 0.0
    tau: float = 0.07
    gamma: float = 1.0
    t_min_frac: float = 0.05
    t_max_frac: float = 0.95
    w_kind: str = 'constant'
    seed: int = 0
    apply_to_source: bool = True
    t_edit_frac: float = 0.3
    normalize_features: bool = True
    snapshot_every: int = 50
    baseline_on_pdm: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'method', DistillMethod(self.method))
        if self.steps < 0:
            raise InvalidArgumentError('steps must be >= 0')
        if self.lr <= 0:
            raise InvalidArgumentError('lr must be > 0')
        if self.grad_scale <= 0:
            raise InvalidArgumentError('grad_scale must be > 0')
        if not math.isfinite(self.omega) or self.omega < 0:
            raise InvalidArgumentError('omega must be finite and >= 0')
        if self.tau <= 0:
            raise InvalidArgumentError('tau must be > 0')
        if self.gamma < 0:
            raise InvalidArgumentError('gamma must be >= 0')
        if not 0.0 < self.t_min_frac < self.t_max_frac < 1.0:
            raise InvalidArgumentError('need 0 < t_min_frac < t_max_frac < 1')
        if self.w_kind not in W_KINDS:
            raise InvalidArgumentError(f'w_kind must be one of {W_KINDS}')
        if self.snapshot_every < 1:
            raise InvalidArgumentError('snapshot_every must be >= 1')

    @classmethod
    def for_method(cls, method, **overrides: Any) -> 'DistillConfig':
        """Config at the published operating point of ``method``.

        Overrides whose value is None keep the method default.
        """
        method = DistillMethod(method)
        values = dict(_METHOD_DEFAULTS[method])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(method=method, **values)

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.omega, self.apply_to_source)

    def timestep_range(self, sched: NoiseSchedule) -> Tuple[int, int]:
        lo = max(1, math.ceil(self.t_min_frac * sched.num_steps))
        hi = math.floor(self.t_max_frac * sched.num_steps)
        if hi < lo:
            raise InvalidArgumentError(
                f'timestep range [{self.t_min_frac}, {self.t_max_frac}] is empty for T={sched.num_steps}')
        return lo, hi

    def weight(self, t: int, sched: NoiseSchedule) -> float:
        if self.w_kind == 'one_minus_alpha_bar':
            return 1.0 - sched.alpha_bar_at(t)
        return 1.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['method'] = self.method.value
        data['lambda'] = data.pop('lam')
        return data


class NoiseSource(Protocol):
    """Where an edit loop draws its (t, eps) pairs from."""

    def draw_timestep(self, lo: int, hi: int) -> int:
        ...

    def draw_noise(self, shape: Tuple[int, ...]) -> torch.Tensor:
        ...


class TorchNoiseSource:
    """Seeded torch.Generator backed noise source; t is uniform on [lo, hi]."""

    def __init__(self, seed: int):
        self.generator = torch.Generator().manual_seed(seed)

    def draw_timestep(self, lo: int, hi: int) -> int:
        return int(torch.randint(lo, hi + 1, (1,), generator=self.generator))

    def draw_noise(self, shape: Tuple[int, ...]) -> torch.Tensor:
        return torch.randn(shape, generator=self.generator, dtype=DTYPE)


def _check_shapes(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.shape != shape:
            raise InvalidArgumentError(f'shape mismatch {tuple(shape)} vs {tuple(tensor.shape)}')


def _check_timestep(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.num_steps:
        raise InvalidArgumentError(f'timestep {t} outside [1, {sched.num_steps}]')


def sds_gradient(denoiser: Denoiser, x: torch.Tensor, y_tgt: PromptCondition, t: int,
                 eps: torch.Tensor, sched: NoiseSchedule, guidance: GuidanceConfig,
                 w: float = 1.0) -> torch.Tensor:
    """w(t) * (eps_hat(x_t, y_tgt, t) - eps)."""
    _check_shapes(x, eps)
    _check_timestep(t, sched)
    x_t = forward_diffuse(x, t, eps, sched)
    return w * (guided_noise(denoiser, x_t, y_tgt, t, guidance.omega) - eps)


def dds_gradient(denoiser: Denoiser, x: torch.Tensor, x_src: torch.Tensor, y_tgt: PromptCondition,
                 y_src: PromptCondition, t: int, eps: torch.Tensor, sched: NoiseSchedule,
                 guidance: GuidanceConfig, w: float = 1.0) -> torch.Tensor:
    """Delta score between the target and source branches under shared (t, eps)."""
    return _delta_gradient(denoiser, denoiser, x, x_src, y_tgt, y_src, t, eps, sched, guidance, w)


def _delta_gradient(target: Denoiser, source: Denoiser, x: torch.Tensor, x_src: torch.Tensor,
                    y_tgt: PromptCondition, y_src: PromptCondition, t: int, eps: torch.Tensor,
                    sched: NoiseSchedule, guidance: GuidanceConfig, w: float) -> torch.Tensor:
    _check_shapes(x, x_src, eps)
    _check_timestep(t, sched)
    x_t = forward_diffuse(x, t, eps, sched)
    x_src_t = forward_diffuse(x_src, t, eps, sched)
    eps_tgt = guided_noise(target, x_t, y_tgt, t, guidance.omega)
    eps_src = guided_noise(source, x_src_t, y_src, t, guidance.source_omega)
    return w * (eps_tgt - eps_src)


def pds_gradient(pdm: Denoiser, dpm: Denoiser, x: torch.Tensor, x_src: torch.Tensor,
                 y_tgt: PromptCondition, y_src: PromptCondition, t: int, eps: torch.Tensor,
                 sched: NoiseSchedule, guidance: GuidanceConfig, w: float = 1.0) -> torch.Tensor:
    """Personalized delta score: target branch on phi', source branch on phi."""
    pdm.require_known(y_tgt)
    return _delta_gradient(pdm, dpm, x, x_src, y_tgt, y_src, t, eps, sched, guidance, w)


def shift_gradient(pdm: Denoiser, dpm: Denoiser, x: torch.Tensor, y_tgt: PromptCondition, t: int,
                   eps: torch.Tensor, sched: NoiseSchedule, guidance: GuidanceConfig,
                   w: float = 1.0) -> torch.Tensor:
    """w(t) * (eps_phi'(x_t, y_tgt, t) - eps_phi(x_t, y_tgt, t)) on the same x_t."""
    _check_shapes(x, eps)
    _check_timestep(t, sched)
    pdm.require_known(y_tgt)
    dpm.require_known(y_tgt)
    x_t = forward_diffuse(x, t, eps, sched)
    return w * (guided_noise(pdm, x_t, y_tgt, t, guidance.omega)
                - guided_noise(dpm, x_t, y_tgt, t, guidance.omega))


def pds_o_gradient(pdm: Denoiser, dpm: Denoiser, x: torch.Tensor, x_src: torch.Tensor,
                   y_tgt: PromptCondition, y_src: PromptCondition, t: int, eps: torch.Tensor,
                   lam: float, sched: NoiseSchedule, guidance: GuidanceConfig,
                   w: float = 1.0) -> torch.Tensor:
    """PDS gradient plus lam times the shift regularizer; lam == 0 is plain PDS."""
    grad = pds_gradient(pdm, dpm, x, x_src, y_tgt, y_src, t, eps, sched, guidance, w)
    if lam == 0:
        return grad
    return grad + lam * shift_gradient(pdm, dpm, x, y_tgt, t, eps, sched, guidance, w)


# ---------------------------------------------------------------------------
# Contrastive feature losses
# ---------------------------------------------------------------------------

def patch_contrastive_loss(queries: torch.Tensor, keys: torch.Tensor, tau: float,
                           normalize: bool = True) -> torch.Tensor:
    """InfoNCE over N patches: query i is positive with key i, negative with the rest.

    Args:
        queries: (N, D) target-branch patches.
        keys: (N, D) source-branch patches.
        tau: Temperature, > 0.
        normalize: L2-normalize patches before the dot products.
    """
    if queries.shape != keys.shape or queries.ndim != 2:
        raise InvalidArgumentError('queries and keys must be matching (N, D) matrices')
    if tau <= 0:
        raise InvalidArgumentError('tau must be > 0')
    if queries.shape[0] < 2:
        raise DegenerateInputError('a contrastive loss needs at least two patches')
    if normalize:
        queries = F.normalize(queries, dim=1)
        keys = F.normalize(keys, dim=1)
    logits = queries @ keys.T / tau
    labels = torch.arange(queries.shape[0])
    return F.cross_entropy(logits, labels)


def temporal_patches(features: torch.Tensor) -> torch.Tensor:
    """(T_l, F_l, C_l) -> (T_l, F_l * C_l)."""
    return features.reshape(features.shape[0], -1)


def spatial_patches(features: torch.Tensor) -> torch.Tensor:
    """(T_l, F_l, C_l) -> (T_l * F_l, C_l)."""
    return features.reshape(-1, features.shape[-1])


def _contrastive_loss_and_grad(target: Denoiser, source: Denoiser, x: torch.Tensor,
                               x_src: torch.Tensor, y_tgt: PromptCondition, y_src: PromptCondition,
                               t: int, eps: torch.Tensor, tau: float, sched: NoiseSchedule,
                               patches: Callable[[torch.Tensor], torch.Tensor],
                               normalize: bool) -> Tuple[float, torch.Tensor]:
    for denoiser in (target, source):
        if not denoiser.supports_features:
            raise UnsupportedCapabilityError(f'{type(denoiser).__name__} does not expose features')
    _check_shapes(x, x_src, eps)
    _check_timestep(t, sched)

    x_t = forward_diffuse(x, t, eps, sched)
    x_src_t = forward_diffuse(x_src, t, eps, sched)
    _, h_tgt = target.predict_with_features(x_t, y_tgt, t)
    _, h_src = source.predict_with_features(x_src_t, y_src, t)
    if h_tgt.shape != h_src.shape:
        raise InvalidArgumentError('target and source feature maps differ in shape')

    with torch.enable_grad():
        h = h_tgt.detach().clone().requires_grad_(True)
        loss = patch_contrastive_loss(patches(h), patches(h_src.detach()), tau, normalize)
        (cotangents,) = torch.autograd.grad(loss, h)

    # x_t = sqrt(a) x + sqrt(1 - a) eps
    grad_x_t = target.feature_pullback(x_t, y_tgt, t, cotangents)
    return float(loss.detach()), math.sqrt(sched.alpha_bar_at(t)) * grad_x_t


def pcon_loss_and_grad(pdm: Denoiser, dpm: Denoiser, x: torch.Tensor, x_src: torch.Tensor,
                       y_tgt: PromptCondition, y_src: PromptCondition, t: int, eps: torch.Tensor,
                       tau: float, sched: NoiseSchedule,
                       normalize: bool = True) -> Tuple[float, torch.Tensor]:
    """Temporal patch contrastive loss between phi' target features and phi source features.

    Each frame of the target feature map is a query; the same frame of the
    source features is its positive and every other frame a negative. The
    gradient flows only through the target branch.
    """
    return _contrastive_loss_and_grad(pdm, dpm, x, x_src, y_tgt, y_src, t, eps, tau, sched,
                                      temporal_patches, normalize)


def patchnce_loss_and_grad(denoiser: Denoiser, x: torch.Tensor, x_src: torch.Tensor,
                           y_tgt: PromptCondition, y_src: PromptCondition, t: int,
                           eps: torch.Tensor, tau: float, sched: NoiseSchedule,
                           normalize: bool = True) -> Tuple[float, torch.Tensor]:
    """Spatial variant over all T_l x F_l channel vectors of a single model."""
    return _contrastive_loss_and_grad(denoiser, denoiser, x, x_src, y_tgt, y_src, t, eps, tau,
                                      sched, spatial_patches, normalize)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _edit_timestep(t_edit_frac: float, sched: NoiseSchedule) -> int:
    if not 0.0 < t_edit_frac <= 1.0:
        raise InvalidArgumentError('t_edit_frac must be in (0, 1]')
    return max(1, round(t_edit_frac * sched.num_steps))


def sdedit_baseline(x_src: torch.Tensor, y_tgt: PromptCondition, dpm: Denoiser, t_edit_frac: float,
                    omega: float, sched: NoiseSchedule, seed: int, steps: int = 50) -> torch.Tensor:
    """Noise the source to t_edit with fresh noise, then denoise under y_tgt."""
    t_edit = _edit_timestep(t_edit_frac, sched)
    generator = torch.Generator().manual_seed(seed)
    eps = torch.randn(x_src.shape, generator=generator, dtype=DTYPE)
    x_t = forward_diffuse(x_src, t_edit, eps, sched)
    return ddim_sample(x_t, y_tgt, dpm, min(steps, t_edit), omega, sched,
                       t_start=t_edit, generator=generator)


def ddim_edit_baseline(x_src: torch.Tensor, y_src: PromptCondition, y_tgt: PromptCondition,
                       model: Denoiser, t_edit_frac: float, omega: float, sched: NoiseSchedule,
                       steps: int = 50) -> torch.Tensor:
    """DDIM-invert under y_src without guidance, then sample under y_tgt."""
    t_edit = _edit_timestep(t_edit_frac, sched)
    steps = min(steps, t_edit)
    latent = ddim_invert(x_src, y_src, model, steps, 1.0, sched, t_end=t_edit)
    return ddim_sample(latent, y_tgt, model, steps, omega, sched, t_start=t_edit)


# ---------------------------------------------------------------------------
# Editing loop
# ---------------------------------------------------------------------------

@dataclass
class EditResult:
    """Outcome of one edit run.

    Attributes:
        x_edited: Final spectrogram.
        trajectory: (iteration, snapshot) pairs, first one the initialization.
        records: One dict per iteration (t, gradient norm, feature loss).
            Baselines record one entry per DDIM step actually run, which is
            ``min(steps, t_edit)``; ``extra`` reports both counts.
        config: The DistillConfig the run used.
    """

    x_edited: Spectrogram
    trajectory: List[Tuple[int, torch.Tensor]]
    records: List[Dict[str, Any]]
    config: DistillConfig
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_report(self) -> Dict[str, Any]:
        return {
            'config': self.config.to_dict(),
            'seed': self.seed,
            'records': self.records,
            'snapshots': [step for step, _ in self.trajectory],
            **self.extra,
        }


def _method_gradient(method: DistillMethod, config: DistillConfig, dpm: Denoiser,
                     pdm: Optional[Denoiser], theta: torch.Tensor, x_src: torch.Tensor,
                     y_src: PromptCondition, y_tgt: PromptCondition, t: int, eps: torch.Tensor,
                     sched: NoiseSchedule) -> Tuple[torch.Tensor, Optional[float]]:
    guidance = config.guidance
    w = config.weight(t, sched)
    feature_loss = None

    if method is DistillMethod.SDS:
        return sds_gradient(dpm, theta, y_tgt, t, eps, sched, guidance, w), None
    if method in (DistillMethod.DDS, DistillMethod.DDS_PATCHNCE):
        grad = dds_gradient(dpm, theta, x_src, y_tgt, y_src, t, eps, sched, guidance, w)
        if method is DistillMethod.DDS_PATCHNCE and config.gamma > 0:
            feature_loss, g = patchnce_loss_and_grad(dpm, theta, x_src, y_tgt, y_src, t, eps,
                                                     config.tau, sched, config.normalize_features)
            grad = grad + config.gamma * g
        return grad, feature_loss

    lam = 0.0 if method is DistillMethod.PDS else config.lam
    grad = pds_o_gradient(pdm, dpm, theta, x_src, y_tgt, y_src, t, eps, lam, sched, guidance, w)
    if method is DistillMethod.STEERMUSIC_PLUS and config.gamma > 0:
        feature_loss, g = pcon_loss_and_grad(pdm, dpm, theta, x_src, y_tgt, y_src, t, eps,
                                             config.tau, sched, config.normalize_features)
        grad = grad + config.gamma * g
    return grad, feature_loss


def _run_baseline(x_src: Spectrogram, y_src: PromptCondition, y_tgt: PromptCondition,
                  dpm: Denoiser, pdm: Optional[Denoiser], config: DistillConfig,
                  sched: NoiseSchedule) -> EditResult:
    if config.baseline_on_pdm and pdm is None:
        raise InvalidArgumentError('baseline_on_pdm is set but no personalized model was given')
    model = pdm if config.baseline_on_pdm else dpm
    t_edit = _edit_timestep(config.t_edit_frac, sched)
    steps = min(config.steps, t_edit)
    if steps < config.steps:
        logger.info(f'{config.method.value}: {config.steps} steps requested, {steps} fit below t_edit={t_edit}')
    if config.method is DistillMethod.SDEDIT:
        x = sdedit_baseline(x_src.data, y_tgt, model, config.t_edit_frac, config.omega, sched,
                            config.seed, steps)
    else:
        x = ddim_edit_baseline(x_src.data, y_src, y_tgt, model, config.t_edit_frac, config.omega,
                               sched, steps)
    grid = timestep_grid(t_edit, steps)
    records = [{'step': k + 1, 't': t, 'grad_norm': None, 'feature_loss': None}
               for k, t in enumerate(reversed(grid[1:]))]
    return EditResult(x_src.with_data(x), [(0, x_src.data.clone()), (steps, x.clone())],
                      records, config,
                      {'t_edit': t_edit, 'steps_requested': config.steps, 'steps_run': steps,
                       'model': 'pdm' if config.baseline_on_pdm else 'dpm'})


def edit(x_src: Spectrogram, y_src: PromptCondition, y_tgt: PromptCondition, dpm: Denoiser,
         config: DistillConfig, sched: NoiseSchedule, pdm: Optional[Denoiser] = None,
         noise: Optional[NoiseSource] = None, progress: bool = False) -> EditResult:
    """Edit ``x_src`` from prompt ``y_src`` towards ``y_tgt``.

    theta starts at x_src; each iteration draws exactly one (t, eps) pair,
    shares it across every branch of the method, and takes a plain gradient
    descent step theta -= lr * grad_scale * G.

    Raises:
        InvalidArgumentError: A personalized method without ``pdm``.
    """
    method = config.method
    if method.personalized and pdm is None:
        raise InvalidArgumentError(f'method {method.value} requires a personalized model')
    dpm.require_known(y_src)
    if method.baseline:
        return _run_baseline(x_src, y_src, y_tgt, dpm, pdm, config, sched)

    noise = noise if noise is not None else TorchNoiseSource(config.seed)
    lo, hi = config.timestep_range(sched)
    step_size = config.lr * config.grad_scale
    x0 = x_src.data
    theta = x0.clone()
    trajectory = [(0, theta.clone())]
    records = []

    for k in tqdm(range(1, config.steps + 1), desc=f'edit[{method.value}]', disable=not progress):
        t = noise.draw_timestep(lo, hi)
        eps = noise.draw_noise(tuple(theta.shape))
        grad, feature_loss = _method_gradient(method, config, dpm, pdm, theta, x0, y_src, y_tgt,
                                              t, eps, sched)
        theta = theta - step_size * grad
        if not bool(torch.isfinite(theta).all()):
            raise InvalidStateError(f'edit diverged at iteration {k} (t={t}); lower lr or grad_scale')
        records.append({'step': k, 't': t, 'grad_norm': float(torch.linalg.vector_norm(grad)),
                        'feature_loss': feature_loss})
        if k % config.snapshot_every == 0 or k == config.steps:
            trajectory.append((k, theta.clone()))

    if records:
        logger.debug(f'edit[{method.value}] finished: last grad norm {records[-1]["grad_norm"]:.4g}')
    return EditResult(x_src.with_data(theta), trajectory, records, config)
