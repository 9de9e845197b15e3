"""DPM training, personalization (phi -> phi') and textual inversion."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from steermusic.diffusion import DTYPE, NoiseSchedule
from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.network import DenoiserParams
from steermusic.prompts import NULL_TOKEN_ID, PromptCondition
from steermusic.spectrogram import Spectrogram

logger = logging.getLogger(__name__)

TrainingItem = Tuple[torch.Tensor, PromptCondition]

# (x_t, token_ids, t, overrides) -> (eps_hat, features)
NoiseNetwork = Callable[..., Tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0
    cond_drop: float = 0.1
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgumentError('steps must be >= 0')
        if self.lr <= 0:
            raise InvalidArgumentError('lr must be > 0')
        if self.batch < 1:
            raise InvalidArgumentError('batch must be >= 1')
        if not 0.0 <= self.cond_drop < 1.0:
            raise InvalidArgumentError('cond_drop must be in [0, 1)')


@dataclass
class TrainingRun:
    params: DenoiserParams
    losses: List[float] = field(default_factory=list)


@dataclass
class ReferenceSet:
    """N >= 1 reference clips whose prompts all carry the concept token."""

    concept: str
    concept_id: int
    items: List[Tuple[Spectrogram, PromptCondition]]

    def __post_init__(self):
        if not self.items:
            raise InvalidArgumentError('a reference set needs at least one clip')
        for _, cond in self.items:
            if self.concept_id not in cond.tokens:
                raise InvalidArgumentError(f"every reference prompt must carry [{self.concept}]")

    def __len__(self) -> int:
        return len(self.items)

    def training_items(self) -> List[TrainingItem]:
        return [(spec.data, cond) for spec, cond in self.items]


def dpm_loss(network: NoiseNetwork, x0: torch.Tensor, conds: Sequence[PromptCondition],
             sched: NoiseSchedule, rng: torch.Generator, cond_drop: float = 0.0,
             overrides: Optional[Dict[int, torch.Tensor]] = None) -> torch.Tensor:
    """Mean squared epsilon residual over a batch (B, T, F).

    Draws, in order, t ~ U{1..T}, eps ~ N(0, I) and the conditioning-dropout
    mask from ``rng``; dropped prompts become the null prompt.
    """
    batch = x0.shape[0]
    if batch == 0 or len(conds) != batch:
        raise InvalidArgumentError('dpm_loss needs a nonempty batch with one prompt per clip')
    t = torch.randint(1, sched.num_steps + 1, (batch,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=DTYPE)
    drop = torch.rand(batch, generator=rng, dtype=DTYPE) < cond_drop

    a = sched.alpha_bar[t].reshape(batch, *([1] * (x0.ndim - 1)))
    x_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
    token_ids = [[NULL_TOKEN_ID] if bool(drop[b]) else conds[b].token_ids() for b in range(batch)]
    eps_hat, _ = network(x_t, token_ids, t, overrides)
    return torch.mean((eps_hat - eps) ** 2)


def _batch(items: Sequence[TrainingItem]) -> Tuple[torch.Tensor, List[PromptCondition]]:
    if not items:
        raise InvalidArgumentError('empty batch')
    return torch.stack([x for x, _ in items]), [c for _, c in items]


def dpm_loss_and_param_grads(params: DenoiserParams, batch: Sequence[TrainingItem],
                             sched: NoiseSchedule, rng: torch.Generator,
                             cond_drop: float = 0.0) -> Tuple[float, Dict[str, torch.Tensor]]:
    """Loss value and gradients for every named parameter (reverse mode)."""
    x0, conds = _batch(batch)
    named = list(params.network.named_parameters())
    with torch.enable_grad():
        loss = dpm_loss(params.network, x0, conds, sched, rng, cond_drop)
        grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    result = {}
    for (name, p), g in zip(named, grads):
        result[name] = torch.zeros_like(p) if g is None else g.detach()
    return float(loss.detach()), result


def _fit(params: DenoiserParams, items: Sequence[TrainingItem], sched: NoiseSchedule,
         steps: int, lr: float, batch: int, seed: int, cond_drop: float,
         log_every: int, desc: str, progress: bool) -> List[float]:
    """Adam on all network weights of ``params`` (mutated in place)."""
    rng = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(params.network.parameters(), lr=lr, betas=(0.9, 0.999))
    losses = []
    for step in tqdm(range(steps), desc=desc, disable=not progress):
        idx = torch.randint(len(items), (batch,), generator=rng).tolist()
        x0, conds = _batch([items[i] for i in idx])
        optimizer.zero_grad(set_to_none=True)
        loss = dpm_loss(params.network, x0, conds, sched, rng, cond_drop)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            window = losses[-log_every:]
            logger.info(f'{desc} step {step + 1}/{steps}: loss {sum(window) / len(window):.5f}')
    return losses


def train(dataset: Sequence[TrainingItem], config: TrainingConfig, sched: NoiseSchedule,
          params: DenoiserParams, progress: bool = False) -> TrainingRun:
    """Train a copy of ``params`` with the DPM objective; deterministic given seed."""
    if not dataset:
        raise InvalidArgumentError('cannot train on an empty dataset')
    trained = params.copy()
    trained.network.train()
    losses = _fit(trained, dataset, sched, config.steps, config.lr, config.batch, config.seed,
                  config.cond_drop, config.log_every, 'train', progress)
    trained.network.eval()
    logger.info(f'Training finished after {config.steps} steps')
    return TrainingRun(trained, losses)


def evaluate_dpm_loss(params: DenoiserParams, items: Sequence[TrainingItem], sched: NoiseSchedule,
                      seed: int = 1234, repeats: int = 8,
                      overrides: Optional[Dict[int, torch.Tensor]] = None) -> float:
    """Average DPM loss over ``repeats`` fixed draws, for comparing models."""
    x0, conds = _batch(items)
    rng = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(repeats):
            total += float(dpm_loss(params.network, x0, conds, sched, rng, 0.0, overrides))
    return total / repeats


def _require_concept(params: DenoiserParams, ref: ReferenceSet) -> None:
    if not params.vocabulary.has_concept(ref.concept):
        raise InvalidStateError(f"concept token '{ref.concept}' is not registered in the vocabulary")
    if params.concept_id(ref.concept) != ref.concept_id:
        raise InvalidStateError(f"concept token '{ref.concept}' has a different id in this model")


def personalize(params: DenoiserParams, ref: ReferenceSet, sched: NoiseSchedule,
                steps: int = 100, lr: float = 1e-5, seed: int = 0,
                batch: Optional[int] = None, progress: bool = False) -> DenoiserParams:
    """Fine-tune all weights on the reference set, returning phi' (phi untouched)."""
    _require_concept(params, ref)
    tuned = params.copy()
    if steps == 0:
        return tuned
    tuned.network.train()
    _fit(tuned, ref.training_items(), sched, steps, lr, batch or len(ref), seed, 0.0,
         max(steps // 4, 1), 'personalize', progress)
    tuned.network.eval()
    return tuned


def textual_inversion(params: DenoiserParams, ref: ReferenceSet, sched: NoiseSchedule,
                      steps: int = 100, lr: float = 5e-3, seed: int = 0,
                      batch: Optional[int] = None, progress: bool = False) -> torch.Tensor:
    """Optimise only the concept embedding row; network weights stay frozen."""
    _require_concept(params, ref)
    concept_id = ref.concept_id
    vector = params.network.token_embedding.weight[concept_id].detach().clone().requires_grad_(True)
    if steps == 0:
        return vector.detach()

    items = ref.training_items()
    batch = batch or len(items)
    rng = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam([vector], lr=lr)
    for step in tqdm(range(steps), desc='textual-inversion', disable=not progress):
        idx = torch.randint(len(items), (batch,), generator=rng).tolist()
        x0, conds = _batch([items[i] for i in idx])
        with torch.enable_grad():
            loss = dpm_loss(params.network, x0, conds, sched, rng, 0.0, {concept_id: vector})
            (grad,) = torch.autograd.grad(loss, [vector])
        optimizer.zero_grad(set_to_none=True)
        vector.grad = grad
        optimizer.step()
        if (step + 1) % max(steps // 4, 1) == 0:
            logger.info(f'textual-inversion step {step + 1}/{steps}: loss {float(loss):.5f}')
    return vector.detach()
