"""Synthetic compositional clips: melody x instrument x genre x texture x concept.

Clips are rendered directly on the spectrogram grid. The melody sets the
fundamental bin of every frame and is the loudest bin by construction;
instruments and concepts only shape the overtones, the genre only touches
the low band and the texture only the high band. Editing tests rely on
that separation.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.prompts import CONCEPT_SLOT, PromptCondition, PromptVocabulary
from steermusic.reports import SCHEMA_VERSION, write_json
from steermusic.spectrogram import (Spectrogram, geometric_bins, load_spectrogram,
                                    save_spectrogram)
from steermusic.training import ReferenceSet

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 1

FRAMES = 32
BINS = 64
F_LOW = 80.0
F_HIGH = 4000.0
FRAME_HOP_SECONDS = 0.03125
SAMPLE_RATE = 16000
FRAMES_PER_NOTE = 4
MIN_FRAMES = 8

# Log compression: magnitude 0 -> 0, magnitude 1 -> 1
COMPRESSION = 100.0

GENRE_BAND = range(0, 4)
TEXTURE_BAND = range(56, 64)

# C major, E3 (165 Hz) to E5 (659 Hz), as MIDI notes
SCALE = [52, 53, 55, 57, 59, 60, 62, 64, 65, 67, 69, 71, 72, 74, 76]

# Overtone amplitudes relative to the fundamental (index 0 is harmonic 1).
# Overtones stay <= 0.35 so the fundamental keeps the top CQT bin.
INSTRUMENT_PROFILES: Dict[str, Tuple[float, ...]] = {
    'piano': (1.0, 0.35, 0.2, 0.12, 0.08, 0.05, 0.03, 0.02),
    'strings': (1.0, 0.3, 0.28, 0.25, 0.22, 0.18, 0.15, 0.12),
    'flute': (1.0, 0.12, 0.04, 0.015),
    'brass': (1.0, 0.35, 0.33, 0.3, 0.26, 0.22, 0.18, 0.15),
}
# Gain of the frames after each note onset
INSTRUMENT_DECAY = {'piano': 0.8, 'strings': 1.0, 'flute': 0.95, 'brass': 0.9}


@dataclass(frozen=True)
class ConceptProfile:
    """Held-out timbre never used as a base instrument."""

    partials: Tuple[Tuple[float, float], ...]  # (frequency ratio, amplitude)
    vibrato: float = 0.0


CONCEPT_PROFILES: Dict[str, ConceptProfile] = {
    'odd_vibrato': ConceptProfile(((1.0, 1.0), (3.0, 0.3), (5.0, 0.22), (7.0, 0.15)), vibrato=0.45),
    'bell': ConceptProfile(((1.0, 1.0), (2.76, 0.3), (5.4, 0.2), (8.93, 0.12))),
}


@dataclass(frozen=True)
class ClipSpec:
    """Everything that determines one synthetic clip.

    ``concept`` names a profile in CONCEPT_PROFILES and replaces the
    instrument; ``concept_token`` is the vocabulary name used in its prompt.
    """

    melody_seed: int
    instrument: Optional[str] = None
    genre: Optional[str] = None
    texture: Optional[str] = None
    duration_frames: int = FRAMES
    concept: Optional[str] = None
    concept_token: Optional[str] = None

    def __post_init__(self):
        if self.melody_seed < 0:
            raise InvalidArgumentError('melody_seed must be >= 0')
        if self.duration_frames < MIN_FRAMES:
            raise InvalidArgumentError(f'duration_frames must be >= {MIN_FRAMES}')
        if self.concept is not None and self.instrument is not None:
            raise InvalidArgumentError('a concept clip cannot also name an instrument')
        if self.concept is None and self.instrument is None:
            raise InvalidArgumentError('a clip needs an instrument or a concept')
        if self.concept is not None and self.concept not in CONCEPT_PROFILES:
            raise InvalidArgumentError(f'unknown concept profile {self.concept!r}')
        if self.instrument is not None and self.instrument not in INSTRUMENT_PROFILES:
            raise InvalidArgumentError(f'unknown instrument {self.instrument!r}')

    def prompt(self, vocab: PromptVocabulary) -> PromptCondition:
        if self.concept is not None:
            return vocab.condition(**{CONCEPT_SLOT: self.concept_token or self.concept},
                                   genre=self.genre, texture=self.texture)
        return vocab.condition(instrument=self.instrument, genre=self.genre, texture=self.texture)


def bin_frequencies() -> Tuple[float, ...]:
    return geometric_bins(BINS, F_LOW, F_HIGH)


def _bin_position(freq: float) -> float:
    return math.log(freq / F_LOW) / math.log(F_HIGH / F_LOW) * (BINS - 1)


def melody_bins(melody_seed: int, frames: int = FRAMES) -> np.ndarray:
    """Fundamental bin per frame from a seeded diatonic random walk."""
    rng = np.random.default_rng([melody_seed, 0x6d656c])
    n_notes = -(-frames // FRAMES_PER_NOTE)
    degree = int(rng.integers(3, len(SCALE) - 3))
    notes = []
    for _ in range(n_notes):
        notes.append(SCALE[degree])
        degree = int(np.clip(degree + rng.integers(-2, 3), 0, len(SCALE) - 1))
    f0 = 440.0 * 2.0 ** ((np.repeat(notes, FRAMES_PER_NOTE)[:frames] - 69) / 12.0)
    return np.array([round(_bin_position(f)) for f in f0], dtype=np.int64)


def _place(frame: np.ndarray, pos: float, amplitude: float) -> None:
    k = round(pos)
    if 0 <= k < frame.shape[0]:
        frame[k] = max(frame[k], amplitude)


def _render_voice(magnitude: np.ndarray, contour: np.ndarray, spec: ClipSpec) -> None:
    if spec.concept is not None:
        profile = CONCEPT_PROFILES[spec.concept]
        partials, vibrato, decay = profile.partials, profile.vibrato, 1.0
    else:
        partials = tuple((h + 1.0, a) for h, a in enumerate(INSTRUMENT_PROFILES[spec.instrument]))
        vibrato, decay = 0.0, INSTRUMENT_DECAY[spec.instrument]

    octave = math.log(2.0) / math.log(F_HIGH / F_LOW) * (BINS - 1)
    for i, k0 in enumerate(contour):
        gain = decay if i % FRAMES_PER_NOTE else 1.0
        frame = magnitude[i]
        for ratio, amplitude in partials:
            pos = k0 + octave * math.log2(ratio)
            _place(frame, pos, gain * amplitude)
            if vibrato and ratio > 1.0:
                swing = 0.5 * (1.0 + math.sin(2.0 * math.pi * i / 4.0))
                _place(frame, pos + 1, gain * amplitude * vibrato * swing)
                _place(frame, pos - 1, gain * amplitude * vibrato * (1.0 - swing))
        frame[k0] = gain


def _render_genre(magnitude: np.ndarray, genre: str) -> None:
    frames = magnitude.shape[0]
    for i in range(frames):
        if genre == 'rock':
            level = 0.6 if i % 4 == 0 else (0.3 if i % 4 == 2 else 0.0)
        elif genre == 'jazz':
            level = 0.45 if i % 6 in (0, 4) else 0.1
        elif genre == 'ambient':
            level = 0.2 + 0.1 * math.sin(2.0 * math.pi * i / frames)
        else:
            raise InvalidArgumentError(f'no rendering for genre {genre!r}')
        for k in GENRE_BAND:
            magnitude[i, k] = max(magnitude[i, k], level * (1.0 - 0.15 * k))


def _render_texture(magnitude: np.ndarray, texture: str, melody_seed: int) -> None:
    if texture == 'dry':
        return
    if texture != 'airy':
        raise InvalidArgumentError(f'no rendering for texture {texture!r}')
    rng = np.random.default_rng([melody_seed, 0x616972])
    band = list(TEXTURE_BAND)
    noise = rng.uniform(0.05, 0.15, size=(magnitude.shape[0], len(band)))
    magnitude[:, band] = np.maximum(magnitude[:, band], noise)


def compress(magnitude: np.ndarray) -> np.ndarray:
    """Linear magnitude in [0, 1] to the log-compressed data scale."""
    return np.log1p(COMPRESSION * magnitude) / math.log1p(COMPRESSION)


def expand(data: np.ndarray) -> np.ndarray:
    """Inverse of compress; values below 0 are silent."""
    return np.expm1(np.clip(data, 0.0, None) * math.log1p(COMPRESSION)) / COMPRESSION


def gen_clip(spec: ClipSpec, vocab: PromptVocabulary) -> Tuple[Spectrogram, PromptCondition]:
    """Render a clip and its prompt; deterministic in ``spec``.

    Raises:
        InvalidArgumentError: A token of the clip is not in ``vocab``.
    """
    prompt = spec.prompt(vocab)
    contour = melody_bins(spec.melody_seed, spec.duration_frames)
    magnitude = np.zeros((spec.duration_frames, BINS), dtype=np.float64)
    if spec.genre is not None:
        _render_genre(magnitude, spec.genre)
    if spec.texture is not None:
        _render_texture(magnitude, spec.texture, spec.melody_seed)
    _render_voice(magnitude, contour, spec)
    data = torch.from_numpy(compress(np.clip(magnitude, 0.0, 1.0)))
    return Spectrogram(data, FRAME_HOP_SECONDS, bin_frequencies()), prompt


@dataclass
class ManifestItem:
    path: str
    spec: ClipSpec
    prompt: PromptCondition


@dataclass
class DatasetManifest:
    """Clip files with their specs and prompts, relative to ``root``."""

    root: Path
    items: List[ManifestItem]
    vocabulary: PromptVocabulary
    seed: int
    generator_version: int = GENERATOR_VERSION

    def __len__(self) -> int:
        return len(self.items)

    def to_dict(self) -> Dict[str, object]:
        return {
            'schema_version': SCHEMA_VERSION,
            'generator_version': self.generator_version,
            'seed': self.seed,
            'vocabulary': self.vocabulary.to_dict(),
            'items': [{'path': item.path, 'spec': asdict(item.spec),
                       'tokens': item.prompt.token_ids()} for item in self.items],
        }

    def load_items(self) -> List[Tuple[Spectrogram, PromptCondition]]:
        return [(load_spectrogram(self.root / item.path), item.prompt) for item in self.items]

    def training_items(self) -> List[Tuple[torch.Tensor, PromptCondition]]:
        return [(spec.data, prompt) for spec, prompt in self.load_items()]


def gen_dataset(n_clips: int, vocab: PromptVocabulary, seed: int, out_dir: Union[str, Path],
                texture_prob: float = 0.3) -> DatasetManifest:
    """Sample attribute combinations uniformly, write clips and manifest.json."""
    if n_clips < 0:
        raise InvalidArgumentError('n_clips must be >= 0')
    out_dir = Path(out_dir)
    instruments = instruments_of(vocab)
    genres = list(vocab.slots.get('genre', []))
    if n_clips and not instruments:
        raise InvalidArgumentError('vocabulary has no renderable instrument tokens')

    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_clips):
        spec = ClipSpec(
            melody_seed=int(rng.integers(2 ** 31)),
            instrument=instruments[int(rng.integers(len(instruments)))],
            genre=genres[int(rng.integers(len(genres)))] if genres else None,
            texture='airy' if rng.random() < texture_prob else 'dry',
        )
        clip, prompt = gen_clip(spec, vocab)
        rel = f'clips/clip_{i:05d}.spec'
        try:
            save_spectrogram(clip, out_dir / rel)
        except OSError as e:
            raise InvalidStateError(f'cannot write clip {out_dir / rel}: {e}')
        items.append(ManifestItem(rel, spec, prompt))

    manifest = DatasetManifest(out_dir, items, vocab.copy(), seed)
    write_json(out_dir / 'manifest.json', manifest.to_dict())
    logger.info(f'Generated {n_clips} clips in {out_dir}')
    return manifest


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Read manifest.json (or the directory holding it) and check its entries."""
    path = Path(path)
    if path.is_dir():
        path = path / 'manifest.json'
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise InvalidArgumentError(f'cannot read manifest {path}: {e}')

    vocab = PromptVocabulary.from_dict(data['vocabulary'])
    root = path.parent
    items = []
    for entry in data['items']:
        spec = ClipSpec(**entry['spec'])
        prompt = spec.prompt(vocab)
        if prompt.token_ids() != list(entry['tokens']):
            raise InvalidArgumentError(f"manifest prompt for {entry['path']} does not match its spec")
        if not (root / entry['path']).is_file():
            raise InvalidArgumentError(f"manifest entry {entry['path']} is missing under {root}")
        items.append(ManifestItem(entry['path'], spec, prompt))
    return DatasetManifest(root, items, vocab, int(data['seed']),
                           int(data.get('generator_version', GENERATOR_VERSION)))


def gen_reference_set(concept_profile: str, n: int, vocab: PromptVocabulary, seed: int,
                      token: Optional[str] = None) -> ReferenceSet:
    """n clips of one concept profile over distinct melodies, prompted "a recording of [S]".

    The concept token (default: the profile name) must already be registered.
    """
    if n < 1:
        raise InvalidArgumentError('a reference set needs n >= 1 clips')
    token = token or concept_profile
    concept_id = vocab.token_id(CONCEPT_SLOT, token)
    items = []
    for i in range(n):
        spec = ClipSpec(melody_seed=seed * 100_003 + i, concept=concept_profile, concept_token=token)
        items.append(gen_clip(spec, vocab))
    return ReferenceSet(token, concept_id, items)


def resynthesize(x: Spectrogram, sample_rate: int = SAMPLE_RATE, seed: int = 0) -> np.ndarray:
    """Oscillator-bank waveform of a spectrogram, peak-normalized to 0.9.

    Bin k contributes a_k(t) sin(2 pi f_k t + phi_k) with a_k linearly
    interpolated between frame centres and phi_k drawn from ``seed``.
    """
    freqs = np.asarray(x.bin_frequencies, dtype=np.float64)
    if np.any(freqs >= sample_rate / 2):
        raise InvalidStateError(f'bin frequency {freqs.max():.1f} Hz is at or above Nyquist')
    n_samples = int(round(x.frames * x.frame_hop_seconds * sample_rate))
    times = np.arange(n_samples) / sample_rate
    centres = (np.arange(x.frames) + 0.5) * x.frame_hop_seconds

    amplitudes = expand(x.numpy())
    phases = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, size=x.bins)
    waveform = np.zeros(n_samples, dtype=np.float64)
    for k in range(x.bins):
        if not np.any(amplitudes[:, k]):
            continue
        envelope = np.interp(times, centres, amplitudes[:, k])
        waveform += envelope * np.sin(2.0 * np.pi * freqs[k] * times + phases[k])

    peak = np.max(np.abs(waveform)) if n_samples else 0.0
    if peak > 0:
        waveform *= 0.9 / peak
    return waveform


def contour_of(x: Spectrogram) -> np.ndarray:
    """Per-frame argmax bin (ties to the lowest bin)."""
    return np.argmax(x.numpy(), axis=1)


def instruments_of(vocab: PromptVocabulary) -> Sequence[str]:
    return [n for n in vocab.slots.get('instrument', []) if n in INSTRUMENT_PROFILES]
