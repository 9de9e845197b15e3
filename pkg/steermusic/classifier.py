"""Toy attribute classifier behind the CLAP-analog fidelity score."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from steermusic.diffusion import DTYPE
from steermusic.errors import InvalidArgumentError
from steermusic.prompts import PromptCondition, PromptVocabulary
from steermusic.spectrogram import Spectrogram

logger = logging.getLogger(__name__)

DEFAULT_SLOTS = ('instrument', 'genre')


def clip_features(x: torch.Tensor) -> torch.Tensor:
    """Per-bin mean and standard deviation over time: (..., T, F) -> (..., 2F)."""
    return torch.cat([x.mean(dim=-2), x.std(dim=-2, unbiased=False)], dim=-1)


class AttributeClassifier(nn.Module):
    """Shared MLP trunk with one softmax head per prompt slot."""

    def __init__(self, bins: int, slot_labels: Dict[str, List[str]], hidden: int = 64):
        super().__init__()
        self.slot_labels = {slot: list(labels) for slot, labels in slot_labels.items()}
        self.trunk = nn.Sequential(nn.Linear(2 * bins, hidden), nn.SiLU(),
                                   nn.Linear(hidden, hidden), nn.SiLU())
        self.heads = nn.ModuleDict({slot: nn.Linear(hidden, len(labels))
                                    for slot, labels in self.slot_labels.items()})
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        h = self.trunk(clip_features(x))
        return {slot: head(h) for slot, head in self.heads.items()}

    def resolve(self, attribute: str) -> Tuple[str, int]:
        """``'flute'`` or ``'instrument:flute'`` -> (slot, class index)."""
        slot, _, name = attribute.rpartition(':')
        for candidate, labels in self.slot_labels.items():
            if slot and slot != candidate:
                continue
            if name in labels:
                return candidate, labels.index(name)
        raise InvalidArgumentError(f'unknown attribute {attribute!r}')

    def probabilities(self, x: Spectrogram, slot: str) -> torch.Tensor:
        if slot not in self.heads:
            raise InvalidArgumentError(f'classifier has no {slot!r} head')
        with torch.no_grad():
            return F.softmax(self(x.data[None])[slot][0], dim=-1)


@dataclass
class ClassifierRun:
    classifier: AttributeClassifier
    losses: List[float]
    accuracy: Dict[str, float]


def train_classifier(items: Sequence[Tuple[Spectrogram, PromptCondition]], vocab: PromptVocabulary,
                     steps: int = 300, lr: float = 1e-2, seed: int = 0,
                     slots: Sequence[str] = DEFAULT_SLOTS) -> ClassifierRun:
    """Full-batch Adam on the slot labels carried by each prompt; deterministic in seed."""
    if not items:
        raise InvalidArgumentError('cannot train a classifier on no clips')
    slot_labels = {slot: list(vocab.slots[slot]) for slot in slots if vocab.slots.get(slot)}
    x = torch.stack([spec.data for spec, _ in items])
    targets = {}
    for slot, labels in slot_labels.items():
        ids = vocab.ids_in_slot(slot)
        column = []
        for _, prompt in items:
            hits = [ids.index(t) for t in prompt.tokens if t in ids]
            column.append(hits[0] if hits else -100)
        targets[slot] = torch.tensor(column, dtype=torch.long)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = AttributeClassifier(x.shape[-1], slot_labels)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        optimizer.zero_grad(set_to_none=True)
        logits = model(x)
        loss = sum(F.cross_entropy(logits[s], targets[s], ignore_index=-100) for s in slot_labels)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))

    model.eval()
    with torch.no_grad():
        logits = model(x)
    accuracy = {}
    for slot in slot_labels:
        mask = targets[slot] != -100
        if bool(mask.any()):
            hits = logits[slot].argmax(dim=-1)[mask] == targets[slot][mask]
            accuracy[slot] = float(hits.to(DTYPE).mean())
    logger.info(f'Attribute classifier trained for {steps} steps: accuracy {accuracy}')
    return ClassifierRun(model, losses, accuracy)


def attribute_fidelity(x: Spectrogram, target_attribute: str, classifier: AttributeClassifier) -> float:
    """Classifier probability that ``x`` carries ``target_attribute``."""
    slot, index = classifier.resolve(target_attribute)
    return float(classifier.probabilities(x, slot)[index])
