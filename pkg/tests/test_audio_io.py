import io
import struct

import numpy as np
import pytest
from scipy.io import wavfile

from steermusic.audio_io import decode_wav, encode_wav, read_wav, write_wav
from steermusic.errors import InvalidArgumentError, WavFormatError


def test_round_trip_within_quantization(tmp_path):
    wav = np.random.default_rng(0).uniform(-1.0, 1.0, 4000)
    path = write_wav(wav, tmp_path / 'clip.wav')
    restored = read_wav(path)
    assert restored.shape == wav.shape
    assert float(np.max(np.abs(restored - wav))) <= 2.0 ** -15


def test_out_of_range_samples_are_clipped():
    restored = decode_wav(encode_wav(np.array([2.0, -3.0, 0.5])))
    assert restored[0] == 1.0 and restored[1] == -1.0


def test_golden_header():
    raw = encode_wav(np.zeros(4))
    expected = (b'RIFF' + struct.pack('<I', 36 + 8) + b'WAVE'
                + b'fmt ' + struct.pack('<IHHIIHH', 16, 1, 1, 16000, 32000, 2, 16)
                + b'data' + struct.pack('<I', 8))
    assert raw[:44] == expected
    assert len(raw) == 52


def test_writing_is_deterministic(tmp_path):
    wav = np.sin(np.linspace(0, 20, 1000))
    a = write_wav(wav, tmp_path / 'a.wav').read_bytes()
    b = write_wav(wav, tmp_path / 'b.wav').read_bytes()
    assert a == b


def test_multichannel_input_rejected():
    with pytest.raises(InvalidArgumentError):
        encode_wav(np.zeros((10, 2)))


def test_non_finite_input_rejected():
    with pytest.raises(InvalidArgumentError):
        encode_wav(np.array([0.0, np.nan]))


def test_stereo_file_rejected():
    buffer = io.BytesIO()
    wavfile.write(buffer, 16000, np.zeros((10, 2), dtype=np.int16))
    with pytest.raises(WavFormatError) as info:
        decode_wav(buffer.getvalue())
    assert info.value.offset == 22


def test_wrong_sample_rate():
    buffer = io.BytesIO()
    wavfile.write(buffer, 44100, np.zeros(10, dtype=np.int16))
    with pytest.raises(WavFormatError) as info:
        decode_wav(buffer.getvalue())
    assert info.value.offset == 24


def test_eight_bit_file_rejected():
    buffer = io.BytesIO()
    wavfile.write(buffer, 16000, np.zeros(10, dtype=np.uint8))
    with pytest.raises(WavFormatError) as info:
        decode_wav(buffer.getvalue())
    assert info.value.offset == 34


def test_bad_magic():
    raw = bytearray(encode_wav(np.zeros(4)))
    raw[0:4] = b'RIFX'
    with pytest.raises(WavFormatError) as info:
        decode_wav(bytes(raw))
    assert info.value.offset == 0


def test_truncated_file():
    with pytest.raises(WavFormatError):
        decode_wav(encode_wav(np.zeros(100))[:30])


def test_error_payload_names_the_offset():
    with pytest.raises(WavFormatError) as info:
        decode_wav(b'JUNKJUNKJUNK', path='broken.wav')
    payload = info.value.to_dict()
    assert payload['offset'] == 0
    assert payload['error'] == 'wav-format'


def test_missing_file(tmp_path):
    with pytest.raises(InvalidArgumentError):
        read_wav(tmp_path / 'absent.wav')
