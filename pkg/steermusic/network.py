"""Toy conditional noise-prediction network and its parameter container.

Layout: frequency patches are projected to C channels, two residual
convolution blocks mix time and frequency, one self-attention block attends
over per-frame tokens, and a linear head maps channels back to bins. The
attention block output is the feature map used by the contrastive losses.
"""

import base64
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from steermusic.diffusion import DTYPE
from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.prompts import CONCEPT_SLOT, PromptCondition, PromptVocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'steermusic-checkpoint'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Immutable layer sizes of the toy network."""

    frames: int = 32
    bins: int = 64
    patch_bins: int = 16
    channels: int = 64
    attention_dim: int = 64
    embed_dim: int = 64
    num_res_blocks: int = 2

    def __post_init__(self):
        if self.bins % self.patch_bins:
            raise InvalidArgumentError('bins must be a multiple of patch_bins')
        if min(asdict(self).values()) < 1:
            raise InvalidArgumentError('all architecture sizes must be positive')

    @property
    def freq_patches(self) -> int:
        return self.bins // self.patch_bins

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        """(T_l, F_l, C_l) of the attention feature map."""
        return (self.frames, self.freq_patches, self.channels)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal timestep embedding, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions over the (time, frequency-patch) grid plus conditioning."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, dtype=DTYPE)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, dtype=DTYPE)
        self.cond_proj = nn.Linear(embed_dim, channels, dtype=DTYPE)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        # h: (B, C, T, F_l)
        r = self.conv1(F.silu(h)) + self.cond_proj(emb)[:, :, None, None]
        r = self.conv2(F.silu(r))
        return h + r


class TemporalSelfAttention(nn.Module):
    """Single-head self-attention over per-frame tokens of size F_l * C."""

    def __init__(self, token_dim: int, attention_dim: int, embed_dim: int):
        super().__init__()
        self.cond_proj = nn.Linear(embed_dim, token_dim, dtype=DTYPE)
        self.query = nn.Linear(token_dim, attention_dim, dtype=DTYPE)
        self.key = nn.Linear(token_dim, attention_dim, dtype=DTYPE)
        self.value = nn.Linear(token_dim, attention_dim, dtype=DTYPE)
        self.out = nn.Linear(attention_dim, token_dim, dtype=DTYPE)
        self.scale = 1.0 / math.sqrt(attention_dim)

    def forward(self, tokens: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        # tokens: (B, T, F_l * C)
        x = tokens + self.cond_proj(emb)[:, None, :]
        q, k, v = self.query(x), self.key(x), self.value(x)
        weights = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        return tokens + self.out(weights @ v)


class ToyDenoiserNetwork(nn.Module):
    """epsilon-prediction network returning (eps_hat, attention features)."""

    def __init__(self, arch: Architecture, vocab_size: int):
        super().__init__()
        self.arch = arch
        self.token_embedding = nn.Embedding(vocab_size, arch.embed_dim, dtype=DTYPE)
        self.time_mlp = nn.Sequential(
            nn.Linear(arch.embed_dim, arch.embed_dim, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(arch.embed_dim, arch.embed_dim, dtype=DTYPE),
        )
        self.input_proj = nn.Linear(arch.patch_bins, arch.channels, dtype=DTYPE)
        self.blocks = nn.ModuleList(
            ResidualBlock(arch.channels, arch.embed_dim) for _ in range(arch.num_res_blocks)
        )
        self.attention = TemporalSelfAttention(
            arch.freq_patches * arch.channels, arch.attention_dim, arch.embed_dim)
        self.output_proj = nn.Linear(arch.channels, arch.patch_bins, dtype=DTYPE)

    def prompt_embedding(self, token_ids: Sequence[Sequence[int]],
                         overrides: Optional[Dict[int, torch.Tensor]] = None) -> torch.Tensor:
        """Mean of token embeddings per prompt, shape (B, E)."""
        table = self.token_embedding.weight
        if overrides:
            ids = torch.tensor(sorted(overrides), dtype=torch.long)
            rows = torch.stack([overrides[i] for i in sorted(overrides)])
            table = table.index_copy(0, ids, rows)
        weights = torch.zeros(len(token_ids), table.shape[0], dtype=DTYPE)
        for b, ids in enumerate(token_ids):
            weights[b, list(ids)] = 1.0 / len(ids)
        return weights @ table

    def forward(self, x_t: torch.Tensor, token_ids: Sequence[Sequence[int]], t: torch.Tensor,
                overrides: Optional[Dict[int, torch.Tensor]] = None
                ) -> Tuple[torch.Tensor, torch.Tensor]:
        arch = self.arch
        batch = x_t.shape[0]
        emb = self.time_mlp(timestep_embedding(t, arch.embed_dim))
        emb = emb + self.prompt_embedding(token_ids, overrides)

        patches = x_t.reshape(batch, arch.frames, arch.freq_patches, arch.patch_bins)
        h = self.input_proj(patches).permute(0, 3, 1, 2)
        for block in self.blocks:
            h = block(h, emb)
        tokens = h.permute(0, 2, 3, 1).reshape(batch, arch.frames, arch.freq_patches * arch.channels)
        tokens = self.attention(tokens, emb)
        features = tokens.reshape(batch, arch.frames, arch.freq_patches, arch.channels)
        eps = self.output_proj(features).reshape(batch, arch.frames, arch.bins)
        return eps, features


class DenoiserParams:
    """Weights (phi or phi'), vocabulary and architecture of one toy model.

    Forward passes never mutate a DenoiserParams; training and
    personalization work on copies.
    """

    def __init__(self, network: ToyDenoiserNetwork, vocabulary: PromptVocabulary):
        if network.token_embedding.num_embeddings != len(vocabulary):
            raise InvalidArgumentError('embedding table size does not match vocabulary')
        self.network = network
        self.vocabulary = vocabulary

    @property
    def architecture(self) -> Architecture:
        return self.network.arch

    @classmethod
    def initialize(cls, vocabulary: PromptVocabulary, arch: Optional[Architecture] = None,
                   seed: int = 0) -> 'DenoiserParams':
        """Randomly initialise a network; deterministic given seed."""
        arch = arch or Architecture()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            network = ToyDenoiserNetwork(arch, len(vocabulary))
        return cls(network, vocabulary.copy())

    def copy(self) -> 'DenoiserParams':
        return DenoiserParams(copy.deepcopy(self.network), self.vocabulary.copy())

    def named_weights(self) -> Dict[str, torch.Tensor]:
        return dict(self.network.state_dict())

    def knows(self, cond: PromptCondition) -> bool:
        return all(self.vocabulary.has_token(i) for i in cond.tokens)

    def register_concept(self, name: str) -> int:
        """Add a concept token, growing the embedding table by one row.

        The new row starts at the mean of the instrument embeddings. Returns
        the token id; calling it twice for the same name is a no-op.
        """
        if self.vocabulary.has_concept(name):
            return self.vocabulary.token_id(CONCEPT_SLOT, name)
        instrument_ids = self.vocabulary.ids_in_slot('instrument')
        token_id = self.vocabulary.add_concept(name)
        old = self.network.token_embedding
        grown = nn.Embedding(old.num_embeddings + 1, old.embedding_dim, dtype=DTYPE)
        with torch.no_grad():
            grown.weight[:-1] = old.weight
            if instrument_ids:
                grown.weight[-1] = old.weight[instrument_ids].mean(dim=0)
            else:
                grown.weight[-1] = old.weight.mean(dim=0)
        self.network.token_embedding = grown
        logger.info(f"Registered concept token '{name}' with id {token_id}")
        return token_id

    def concept_id(self, name: str) -> int:
        if not self.vocabulary.has_concept(name):
            raise InvalidStateError(f"concept token '{name}' is not registered")
        return self.vocabulary.token_id(CONCEPT_SLOT, name)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encode_tensor(tensor: torch.Tensor) -> Dict[str, object]:
    array = tensor.detach().cpu().numpy().astype('<f8')
    return {
        'shape': list(array.shape),
        'data': base64.b64encode(array.tobytes(order='C')).decode('ascii'),
    }


def _decode_tensor(entry: Dict[str, object]) -> torch.Tensor:
    raw = base64.b64decode(entry['data'])
    array = np.frombuffer(raw, dtype='<f8').reshape(entry['shape']).astype(np.float64)
    return torch.from_numpy(array.copy())


def checkpoint_dict(params: DenoiserParams) -> Dict[str, object]:
    return {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'architecture': asdict(params.architecture),
        'vocabulary': params.vocabulary.to_dict(),
        'weights': {name: _encode_tensor(w) for name, w in params.named_weights().items()},
    }


def save_checkpoint(params: DenoiserParams, path: Union[str, Path]) -> Path:
    """Write a bit-exact JSON checkpoint."""
    from steermusic.reports import write_json
    return write_json(path, checkpoint_dict(params))


def load_checkpoint(path: Union[str, Path]) -> DenoiserParams:
    """Load a checkpoint written by save_checkpoint."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise InvalidArgumentError(f'cannot read checkpoint {path}: {e}')
    except ValueError as e:
        raise InvalidArgumentError(f'checkpoint {path} is not valid JSON: {e}')
    if data.get('format') != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f'{path} is not a steermusic checkpoint')
    if data.get('version') != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {data.get('version')}")

    arch = Architecture(**data['architecture'])
    vocabulary = PromptVocabulary.from_dict(data['vocabulary'])
    network = ToyDenoiserNetwork(arch, len(vocabulary))
    state = {name: _decode_tensor(entry) for name, entry in data['weights'].items()}
    network.load_state_dict(state, strict=True)
    return DenoiserParams(network, vocabulary)
