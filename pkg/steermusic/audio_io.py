"""Mono 16-bit PCM WAV files."""

import io
import struct
from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile

from steermusic.errors import InvalidArgumentError, WavFormatError
from steermusic.reports import write_bytes

SAMPLE_RATE = 16000
PCM_SCALE = 32767.0

_RIFF = struct.Struct('<4sI4s')
_CHUNK = struct.Struct('<4sI')
_FMT = struct.Struct('<HHIIHH')


def encode_wav(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    """RIFF/WAVE bytes; samples are clipped to [-1, 1] and rounded to int16."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise InvalidArgumentError('only mono (1-D) waveforms can be written')
    if not np.all(np.isfinite(waveform)):
        raise InvalidArgumentError('waveform contains non-finite samples')
    pcm = np.round(np.clip(waveform, -1.0, 1.0) * PCM_SCALE).astype('<i2')
    buffer = io.BytesIO()
    wavfile.write(buffer, sample_rate, pcm)
    return buffer.getvalue()


def write_wav(waveform: np.ndarray, path: Union[str, Path], sample_rate: int = SAMPLE_RATE) -> Path:
    return write_bytes(path, encode_wav(waveform, sample_rate))


def check_header(raw: bytes, path: str = '<bytes>') -> int:
    """Validate RIFF framing and the fmt chunk; returns the sample rate.

    Raises:
        WavFormatError: With the byte offset of the first bad field.
    """
    if len(raw) < _RIFF.size:
        raise WavFormatError('file too short for a RIFF header', len(raw), path)
    riff, size, wave = _RIFF.unpack_from(raw, 0)
    if riff != b'RIFF':
        raise WavFormatError(f'expected RIFF, found {riff!r}', 0, path)
    if size + 8 > len(raw):
        raise WavFormatError(f'RIFF size {size} exceeds file length {len(raw)}', 4, path)
    if wave != b'WAVE':
        raise WavFormatError(f'expected WAVE, found {wave!r}', 8, path)

    offset = _RIFF.size
    sample_rate = None
    while offset + _CHUNK.size <= len(raw):
        chunk_id, chunk_size = _CHUNK.unpack_from(raw, offset)
        body = offset + _CHUNK.size
        if chunk_id == b'fmt ':
            if chunk_size < _FMT.size or body + _FMT.size > len(raw):
                raise WavFormatError(f'fmt chunk too short ({chunk_size} bytes)', offset + 4, path)
            fmt, channels, sample_rate, _, _, bits = _FMT.unpack_from(raw, body)
            if fmt != 1:
                raise WavFormatError(f'unsupported format tag {fmt} (PCM required)', body, path)
            if channels != 1:
                raise WavFormatError(f'{channels} channels found, mono required', body + 2, path)
            if bits != 16:
                raise WavFormatError(f'{bits}-bit samples found, 16-bit required', body + 14, path)
        elif chunk_id == b'data':
            if sample_rate is None:
                raise WavFormatError('data chunk before fmt chunk', offset, path)
            if body + chunk_size > len(raw):
                raise WavFormatError(f'data chunk of {chunk_size} bytes is truncated', offset + 4, path)
            return sample_rate
        offset = body + chunk_size + (chunk_size & 1)
    raise WavFormatError('no data chunk found', offset, path)


def decode_wav(raw: bytes, path: str = '<bytes>',
               expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    sample_rate = check_header(raw, path)
    if sample_rate != expected_rate:
        raise WavFormatError(f'sample rate {sample_rate} Hz, expected {expected_rate} Hz', 24, path)
    _, pcm = wavfile.read(io.BytesIO(raw))
    return pcm.astype(np.float64) / PCM_SCALE


def read_wav(path: Union[str, Path], expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Samples of a mono 16-bit PCM file as float64 in [-1, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise InvalidArgumentError(f'cannot read {path}: {e}')
    return decode_wav(raw, str(path), expected_rate)
