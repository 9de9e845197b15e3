"""The editable data object and its array file format.

Array file layout (all little-endian):
    magic b'SMSPEC\\0\\0' | u16 version | u16 reserved | u32 frames | u32 bins |
    f64 frame_hop_seconds | f64[bins] bin frequencies | f64[frames * bins] data
Data is row-major (frame by frame).
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import torch

from steermusic.diffusion import DTYPE
from steermusic.errors import InvalidArgumentError

ARRAY_MAGIC = b'SMSPEC\x00\x00'
ARRAY_VERSION = 1
_HEADER = struct.Struct('<8sHHIId')


@dataclass(frozen=True)
class Spectrogram:
    """T_frames x F_bins log-magnitude matrix with its time/frequency axes."""

    data: torch.Tensor
    frame_hop_seconds: float
    bin_frequencies: Tuple[float, ...]

    def __post_init__(self):
        if self.data.ndim != 2:
            raise InvalidArgumentError('spectrogram data must be a 2-D matrix')
        if self.data.dtype != DTYPE:
            object.__setattr__(self, 'data', self.data.to(DTYPE))
        if len(self.bin_frequencies) != self.data.shape[1]:
            raise InvalidArgumentError('bin_frequencies must have one entry per bin')
        if not self.frame_hop_seconds > 0:
            raise InvalidArgumentError('frame_hop_seconds must be > 0')
        if not bool(torch.isfinite(self.data).all()):
            raise InvalidArgumentError('spectrogram entries must be finite')
        object.__setattr__(self, 'bin_frequencies', tuple(float(f) for f in self.bin_frequencies))

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.data.shape)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: torch.Tensor) -> 'Spectrogram':
        """Same axes, new values; the shape must not change."""
        if tuple(data.shape) != self.shape:
            raise InvalidArgumentError(f'shape {tuple(data.shape)} differs from {self.shape}')
        return Spectrogram(data.detach().clone(), self.frame_hop_seconds, self.bin_frequencies)

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()


def geometric_bins(n_bins: int, f_low: float, f_high: float) -> Tuple[float, ...]:
    """Geometrically spaced bin centre frequencies from f_low to f_high inclusive."""
    if n_bins < 2 or f_low <= 0 or f_high <= f_low:
        raise InvalidArgumentError('need n_bins >= 2 and 0 < f_low < f_high')
    ratio = math.log(f_high / f_low) / (n_bins - 1)
    return tuple(f_low * math.exp(ratio * k) for k in range(n_bins))


def encode_spectrogram(spec: Spectrogram) -> bytes:
    header = _HEADER.pack(ARRAY_MAGIC, ARRAY_VERSION, 0, spec.frames, spec.bins,
                          spec.frame_hop_seconds)
    freqs = np.asarray(spec.bin_frequencies, dtype='<f8').tobytes()
    data = np.ascontiguousarray(spec.numpy(), dtype='<f8').tobytes(order='C')
    return header + freqs + data


def decode_spectrogram(raw: bytes, source: str = '<bytes>') -> Spectrogram:
    if len(raw) < _HEADER.size:
        raise InvalidArgumentError(f'{source}: truncated spectrogram header')
    magic, version, _, frames, bins, hop = _HEADER.unpack_from(raw, 0)
    if magic != ARRAY_MAGIC:
        raise InvalidArgumentError(f'{source}: not a spectrogram array file')
    if version != ARRAY_VERSION:
        raise InvalidArgumentError(f'{source}: unsupported array version {version}')
    expected = _HEADER.size + 8 * bins + 8 * frames * bins
    if len(raw) != expected:
        raise InvalidArgumentError(f'{source}: expected {expected} bytes, found {len(raw)}')
    offset = _HEADER.size
    freqs = np.frombuffer(raw, dtype='<f8', count=bins, offset=offset)
    offset += 8 * bins
    data = np.frombuffer(raw, dtype='<f8', count=frames * bins, offset=offset).reshape(frames, bins)
    return Spectrogram(torch.from_numpy(data.astype(np.float64)), hop, tuple(freqs.tolist()))


def save_spectrogram(spec: Spectrogram, path: Union[str, Path]) -> Path:
    from steermusic.reports import write_bytes
    return write_bytes(path, encode_spectrogram(spec))


def load_spectrogram(path: Union[str, Path]) -> Spectrogram:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise InvalidArgumentError(f'cannot read spectrogram {path}: {e}')
    return decode_spectrogram(raw, str(path))


def stack(specs: Sequence[Spectrogram]) -> torch.Tensor:
    """Batch tensor (B, T, F) of spectrogram data."""
    return torch.stack([s.data for s in specs])
