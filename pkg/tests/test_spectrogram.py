import math

import pytest
import torch

from steermusic.errors import InvalidArgumentError
from steermusic.spectrogram import (Spectrogram, decode_spectrogram, encode_spectrogram,
                                    geometric_bins, load_spectrogram, save_spectrogram, stack)


def test_geometric_bins():
    bins = geometric_bins(5, 100.0, 1600.0)
    assert bins[0] == pytest.approx(100.0)
    assert bins[-1] == pytest.approx(1600.0)
    assert all(b / a == pytest.approx(2.0) for a, b in zip(bins, bins[1:]))
    with pytest.raises(InvalidArgumentError):
        geometric_bins(1, 100.0, 200.0)


def test_validation(as_spectrogram, randn):
    with pytest.raises(InvalidArgumentError):
        Spectrogram(randn(4), 0.1, (100.0,))
    with pytest.raises(InvalidArgumentError):
        Spectrogram(randn(4, 3), 0.1, (100.0, 200.0))
    with pytest.raises(InvalidArgumentError):
        Spectrogram(randn(2, 2), 0.0, (100.0, 200.0))
    with pytest.raises(InvalidArgumentError):
        Spectrogram(torch.tensor([[math.nan, 0.0]]), 0.1, (100.0, 200.0))
    with pytest.raises(InvalidArgumentError):
        as_spectrogram(randn(8, 16)).with_data(randn(8, 15))


def test_data_is_promoted_to_double():
    spec = Spectrogram(torch.zeros(2, 2, dtype=torch.float32), 0.1, (100.0, 200.0))
    assert spec.data.dtype == torch.float64


def test_file_round_trip_is_exact(tmp_path, as_spectrogram, randn):
    spec = as_spectrogram(randn(8, 16))
    restored = load_spectrogram(save_spectrogram(spec, tmp_path / 'x.spec'))
    assert torch.equal(restored.data, spec.data)
    assert restored.bin_frequencies == spec.bin_frequencies
    assert restored.frame_hop_seconds == spec.frame_hop_seconds


def test_corrupt_files(as_spectrogram, randn, tmp_path):
    raw = encode_spectrogram(as_spectrogram(randn(8, 16)))
    with pytest.raises(InvalidArgumentError):
        decode_spectrogram(raw[:-8])
    with pytest.raises(InvalidArgumentError):
        decode_spectrogram(b'NOTSPEC!' + raw[8:])
    with pytest.raises(InvalidArgumentError):
        load_spectrogram(tmp_path / 'absent.spec')


def test_stack(as_spectrogram, randn):
    batch = stack([as_spectrogram(randn(8, 16, seed=i)) for i in range(3)])
    assert batch.shape == (3, 8, 16)
