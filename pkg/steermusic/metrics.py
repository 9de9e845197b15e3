"""Evaluation metrics.

CQT1-PCC, MFCC-COS and Pearson follow their published formulas. The
Frechet, perceptual and attribute-fidelity measures are analogs built on
toy features; their values are not comparable with FAD, LPAPS or CLAP
scores and every report labels them through METRIC_PROVENANCE.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import librosa
import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import windows

from steermusic.denoiser import Denoiser
from steermusic.errors import (InvalidArgumentError, UndefinedCorrelationError,
                               UndefinedSimilarityError, UnsupportedCapabilityError)
from steermusic.prompts import PromptCondition
from steermusic.spectrogram import Spectrogram

logger = logging.getLogger(__name__)

METRIC_PROVENANCE = {
    'cqt1_pcc': 'formula',
    'mfcc_cos': 'formula',
    'fad_analog': 'analog: Frechet distance of MFCC frame statistics, not comparable to FAD',
    'lpaps_analog': 'analog: toy-denoiser feature distance at t=1, not comparable to LPAPS',
    'clap_analog': 'analog: toy attribute-classifier probability, not comparable to CLAP',
}

CONTOUR_MODES = ('index', 'magnitude')


@dataclass(frozen=True)
class CqtConfig:
    n_bins: int = 128
    bins_per_octave: int = 24
    f_min: float = 32.70
    sample_rate: int = 16000
    hop: int = 512

    def __post_init__(self):
        if self.n_bins < 1 or self.bins_per_octave < 1 or self.hop < 1:
            raise InvalidArgumentError('n_bins, bins_per_octave and hop must be >= 1')
        if self.f_min <= 0:
            raise InvalidArgumentError('f_min must be > 0')
        if self.f_min * 2.0 ** (self.n_bins / self.bins_per_octave) >= self.sample_rate / 2:
            raise InvalidArgumentError('highest CQT bin reaches the Nyquist frequency')

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def frequencies(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    def bin_of(self, freq: float) -> int:
        return int(round(self.bins_per_octave * math.log2(freq / self.f_min)))


def cqt(waveform: np.ndarray, config: CqtConfig = CqtConfig()) -> np.ndarray:
    """Constant-Q magnitudes, shape (frames, n_bins).

    Bin k correlates the signal with a Hann-windowed complex exponential at
    f_k of length Q sr / f_k (capped at the signal length), normalised by the
    window sum. Frame j is centred on sample j * hop of the zero-padded signal.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidArgumentError('cqt needs a nonempty mono waveform')
    n = x.size
    lengths = np.minimum(np.ceil(config.q * config.sample_rate / config.frequencies()), n).astype(int)
    pad = int(lengths.max()) // 2 + 1
    padded = np.pad(x, (pad, pad))
    centres = np.arange(1 + n // config.hop) * config.hop + pad

    out = np.zeros((centres.size, config.n_bins), dtype=np.float64)
    for k, (freq, length) in enumerate(zip(config.frequencies(), lengths)):
        window = windows.hann(length, sym=False)
        window /= window.sum()
        kernel = window * np.exp(-2j * np.pi * freq * np.arange(length) / config.sample_rate)
        starts = centres - length // 2
        segments = np.lib.stride_tricks.sliding_window_view(padded, length)[starts]
        out[:, k] = np.abs(segments @ kernel)
    return out


def top1_contour(magnitudes: np.ndarray, mode: str = 'index') -> np.ndarray:
    """Per-frame top CQT bin: its index (ties to the lowest bin) or its magnitude."""
    if mode not in CONTOUR_MODES:
        raise InvalidArgumentError(f'contour mode must be one of {CONTOUR_MODES}')
    if mode == 'index':
        return np.argmax(magnitudes, axis=1).astype(np.float64)
    return np.max(magnitudes, axis=1)


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Sample Pearson correlation.

    Raises:
        UndefinedCorrelationError: Either sequence has zero variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgumentError('pearson needs two 1-D sequences of equal length')
    if a.size < 2:
        raise InvalidArgumentError('pearson needs at least two values')
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da, da))
    sbb = float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError('correlation is undefined for a constant sequence')
    r = float(np.dot(da, db)) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def align_lengths(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Truncate both waveforms to the shorter one; the flag says whether anything was cut."""
    n = min(len(a), len(b))
    return a[:n], b[:n], len(a) != len(b)


def cqt1_pcc(wav_src: np.ndarray, wav_edit: np.ndarray, config: CqtConfig = CqtConfig(),
             mode: str = 'index') -> float:
    """Pearson correlation of the top-1 CQT contours of two waveforms."""
    wav_src, wav_edit, _ = align_lengths(np.asarray(wav_src), np.asarray(wav_edit))
    return pearson(top1_contour(cqt(wav_src, config), mode),
                   top1_contour(cqt(wav_edit, config), mode))


@dataclass(frozen=True)
class MfccConfig:
    n_mels: int = 40
    n_coeffs: int = 13
    sample_rate: int = 16000
    frame_seconds: float = 0.025
    hop_seconds: float = 0.010
    n_fft: int = 512
    log_floor: float = 1e-10

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_seconds * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_seconds * self.sample_rate))


def mfcc(waveform: np.ndarray, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Mel-frequency cepstral coefficients, shape (frames, n_coeffs).

    Frames are uncentered, so a waveform of N samples gives
    ``1 + (N - n_fft) // hop_length`` rows. The log is natural with a floor;
    a gain change moves only coefficient 0.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidArgumentError('mfcc needs a nonempty mono waveform')
    if x.size < config.n_fft:
        x = np.pad(x, (0, config.n_fft - x.size))
    mel = librosa.feature.melspectrogram(y=x, sr=config.sample_rate, n_fft=config.n_fft,
                                         hop_length=config.hop_length,
                                         win_length=config.frame_length, window='hann',
                                         center=False, power=2.0, n_mels=config.n_mels)
    log_mel = np.log(np.maximum(mel, config.log_floor))
    return librosa.feature.mfcc(S=log_mel, n_mfcc=config.n_coeffs, dct_type=2, norm='ortho').T


def mfcc_cos(wav_edit: np.ndarray, wav_ref: np.ndarray, cutoff: int = 3,
             config: MfccConfig = MfccConfig()) -> float:
    """Cosine similarity of time-averaged MFCCs with the first ``cutoff`` coefficients dropped."""
    if not 0 <= cutoff < config.n_coeffs:
        raise InvalidArgumentError(f'cutoff must be in [0, {config.n_coeffs})')
    a = mfcc(wav_edit, config).mean(axis=0)[cutoff:]
    b = mfcc(wav_ref, config).mean(axis=0)[cutoff:]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError('cosine similarity is undefined for a zero vector')
    return min(1.0, max(-1.0, float(np.dot(a, b) / (na * nb))))


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((matrix + matrix.T) / 2.0)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_feature_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgumentError('feature sets must be (n, d) matrices with the same d')
    dim = a.shape[1]
    if a.shape[0] <= dim or b.shape[0] <= dim:
        raise InvalidArgumentError(f'each feature set needs more than {dim} samples')

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.cov(a, rowvar=False)
    sigma_b = np.cov(b, rowvar=False)
    root_a = _sqrt_psd(sigma_a)
    cross = root_a @ sigma_b @ root_a
    eig = np.linalg.eigvalsh((cross + cross.T) / 2.0)
    trace_sqrt = float(np.sum(np.sqrt(np.maximum(eig, 0.0))))
    diff = mu_a - mu_b
    value = float(diff @ diff) + float(np.trace(sigma_a) + np.trace(sigma_b)) - 2.0 * trace_sqrt
    return max(value, 0.0)


def feature_perceptual_distance(x_a: Spectrogram, x_b: Spectrogram, dpm: Denoiser) -> float:
    """Mean squared distance of channel-normalized features at t=1 under the null prompt."""
    if not dpm.supports_features:
        raise UnsupportedCapabilityError(f'{type(dpm).__name__} does not expose features')
    if x_a.shape != x_b.shape:
        raise InvalidArgumentError('spectrograms must have the same shape')
    null = PromptCondition.null()
    _, h_a = dpm.predict_with_features(x_a.data, null, 1)
    _, h_b = dpm.predict_with_features(x_b.data, null, 1)
    h_a = F.normalize(h_a, dim=-1)
    h_b = F.normalize(h_b, dim=-1)
    return float(torch.sum((h_a - h_b) ** 2, dim=-1).mean())
