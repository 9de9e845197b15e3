import numpy as np
import pytest
import torch

from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.metrics import cqt1_pcc
from steermusic.prompts import CONCEPT_SLOT
from steermusic.spectrogram import Spectrogram, geometric_bins
from steermusic.synth import (BINS, FRAMES, GENRE_BAND, SAMPLE_RATE, ClipSpec, bin_frequencies,
                              compress, contour_of, expand, gen_clip, gen_dataset, gen_reference_set,
                              load_manifest, melody_bins, resynthesize)


class TestCompression:
    def test_log_scale_keeps_the_endpoints(self):
        m = np.array([0.0, 0.01, 0.5, 1.0])
        data = compress(m)
        assert data[0] == 0.0 and data[-1] == pytest.approx(1.0)
        assert data[1] == pytest.approx(np.log(2.0) / np.log(101.0))
        assert np.allclose(expand(data), m, atol=1e-12)

    def test_negative_data_is_silent(self):
        assert expand(np.array([-0.3]))[0] == 0.0


class TestClipSpec:
    def test_too_short(self):
        with pytest.raises(InvalidArgumentError):
            ClipSpec(melody_seed=0, instrument='piano', duration_frames=4)

    def test_concept_and_instrument_are_exclusive(self):
        with pytest.raises(InvalidArgumentError):
            ClipSpec(melody_seed=0, instrument='piano', concept='bell')

    def test_needs_a_voice(self):
        with pytest.raises(InvalidArgumentError):
            ClipSpec(melody_seed=0)

    def test_unknown_profile(self):
        with pytest.raises(InvalidArgumentError):
            ClipSpec(melody_seed=0, instrument='kazoo')

    def test_unknown_genre_token(self, vocab):
        with pytest.raises(InvalidArgumentError):
            gen_clip(ClipSpec(melody_seed=0, instrument='piano', genre='polka'), vocab)


class TestGenClip:
    def test_deterministic(self, vocab):
        spec = ClipSpec(melody_seed=7, instrument='strings', genre='jazz', texture='airy')
        a, prompt_a = gen_clip(spec, vocab)
        b, prompt_b = gen_clip(spec, vocab)
        assert torch.equal(a.data, b.data)
        assert prompt_a == prompt_b

    def test_shape_and_range(self, vocab):
        clip, _ = gen_clip(ClipSpec(melody_seed=1, instrument='brass', genre='rock', texture='airy'), vocab)
        assert clip.shape == (FRAMES, BINS)
        assert clip.bin_frequencies == bin_frequencies()
        assert float(clip.data.min()) >= 0.0 and float(clip.data.max()) <= 1.0

    def test_prompt_matches_attributes(self, vocab):
        _, prompt = gen_clip(ClipSpec(melody_seed=1, instrument='flute', genre='ambient'), vocab)
        assert prompt == vocab.condition(instrument='flute', genre='ambient')

    def test_melody_seeds_give_different_contours(self):
        fractions = [float(np.mean(melody_bins(s) != melody_bins(s + 1000))) for s in range(100)]
        assert np.mean(fractions) >= 0.3
        assert sum(f >= 0.3 for f in fractions) >= 95

    def test_instrument_change_keeps_the_contour(self, vocab):
        piano, _ = gen_clip(ClipSpec(melody_seed=3, instrument='piano', genre='rock'), vocab)
        brass, _ = gen_clip(ClipSpec(melody_seed=3, instrument='brass', genre='rock'), vocab)
        assert np.array_equal(contour_of(piano), contour_of(brass))
        assert not torch.equal(piano.data, brass.data)

    def test_fundamental_is_the_frame_maximum(self, vocab):
        clip, _ = gen_clip(ClipSpec(melody_seed=5, instrument='strings', genre='rock',
                                    texture='airy'), vocab)
        assert np.array_equal(contour_of(clip), melody_bins(5))

    def test_genre_change_stays_in_its_band(self, vocab):
        rock, _ = gen_clip(ClipSpec(melody_seed=2, instrument='flute', genre='rock'), vocab)
        jazz, _ = gen_clip(ClipSpec(melody_seed=2, instrument='flute', genre='jazz'), vocab)
        changed = np.nonzero(np.any(rock.numpy() != jazz.numpy(), axis=0))[0]
        assert len(changed) > 0
        assert set(changed.tolist()) <= set(GENRE_BAND)

    def test_concept_clip(self, vocab):
        vocab.add_concept('sks')
        clip, prompt = gen_clip(ClipSpec(melody_seed=1, concept='odd_vibrato', concept_token='sks'), vocab)
        assert prompt.tokens == {vocab.token_id(CONCEPT_SLOT, 'sks')}
        assert np.array_equal(contour_of(clip), melody_bins(1))


class TestDataset:
    def test_empty_dataset(self, vocab, tmp_path):
        manifest = gen_dataset(0, vocab, 0, tmp_path)
        assert len(manifest) == 0
        assert (tmp_path / 'manifest.json').is_file()

    def test_negative_size(self, vocab, tmp_path):
        with pytest.raises(InvalidArgumentError):
            gen_dataset(-1, vocab, 0, tmp_path)

    def test_covers_every_attribute(self, vocab, tmp_path):
        manifest = gen_dataset(100, vocab, 0, tmp_path)
        seen = set()
        for item in manifest.items:
            seen.update(vocab.name_of(t) for t in item.prompt.tokens)
        expected = set(vocab.slots['instrument']) | set(vocab.slots['genre']) | set(vocab.slots['texture'])
        assert expected <= seen

    def test_manifest_round_trip(self, vocab, tmp_path):
        written = gen_dataset(5, vocab, 3, tmp_path)
        loaded = load_manifest(tmp_path)
        assert [i.spec for i in loaded.items] == [i.spec for i in written.items]
        assert [i.prompt for i in loaded.items] == [i.prompt for i in written.items]
        for (clip, _), item in zip(loaded.load_items(), loaded.items):
            assert torch.equal(clip.data, gen_clip(item.spec, vocab)[0].data)

    def test_same_seed_same_bytes(self, vocab, tmp_path):
        gen_dataset(3, vocab, 11, tmp_path / 'a')
        gen_dataset(3, vocab, 11, tmp_path / 'b')
        for name in ('manifest.json', 'clips/clip_00000.spec', 'clips/clip_00002.spec'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_missing_clip_file(self, vocab, tmp_path):
        gen_dataset(2, vocab, 0, tmp_path)
        (tmp_path / 'clips' / 'clip_00001.spec').unlink()
        with pytest.raises(InvalidArgumentError):
            load_manifest(tmp_path)


class TestReferenceSet:
    def test_every_prompt_is_the_concept(self, vocab):
        vocab.add_concept('sks')
        refs = gen_reference_set('odd_vibrato', 5, vocab, seed=0, token='sks')
        concept_id = vocab.token_id(CONCEPT_SLOT, 'sks')
        assert len(refs) == 5
        assert all(prompt.tokens == {concept_id} for _, prompt in refs.items)

    def test_single_reference(self, vocab):
        vocab.add_concept('bell')
        assert len(gen_reference_set('bell', 1, vocab, seed=0)) == 1

    def test_needs_at_least_one_clip(self, vocab):
        vocab.add_concept('sks')
        with pytest.raises(InvalidArgumentError):
            gen_reference_set('odd_vibrato', 0, vocab, seed=0, token='sks')

    def test_token_must_be_registered(self, vocab):
        with pytest.raises(InvalidArgumentError):
            gen_reference_set('odd_vibrato', 2, vocab, seed=0, token='sks')


class TestResynthesize:
    def test_silence(self, vocab):
        clip, _ = gen_clip(ClipSpec(melody_seed=0, instrument='piano'), vocab)
        wav = resynthesize(clip.with_data(torch.zeros(clip.shape, dtype=torch.float64)))
        assert wav.shape == (SAMPLE_RATE,)
        assert not np.any(wav)

    def test_single_bin_is_a_sinusoid_at_its_frequency(self, vocab):
        clip, _ = gen_clip(ClipSpec(melody_seed=0, instrument='piano'), vocab)
        data = torch.zeros(clip.shape, dtype=torch.float64)
        data[:, 20] = 1.0
        wav = resynthesize(clip.with_data(data))
        spectrum = np.abs(np.fft.rfft(wav))
        freqs = np.fft.rfftfreq(wav.size, 1.0 / SAMPLE_RATE)
        assert abs(freqs[int(np.argmax(spectrum))] - clip.bin_frequencies[20]) <= 1.0
        assert float(np.max(np.abs(wav))) == pytest.approx(0.9)

    def test_bins_above_nyquist(self):
        spec = Spectrogram(torch.ones(8, 4, dtype=torch.float64), 0.03125,
                           geometric_bins(4, 1000.0, 9000.0))
        with pytest.raises(InvalidStateError):
            resynthesize(spec)

    def test_deterministic(self, vocab):
        clip, _ = gen_clip(ClipSpec(melody_seed=4, instrument='strings', genre='jazz'), vocab)
        assert np.array_equal(resynthesize(clip), resynthesize(clip))

    def test_instrument_swap_keeps_the_melody(self, vocab):
        for seed in range(3):
            piano, _ = gen_clip(ClipSpec(melody_seed=seed, instrument='piano'), vocab)
            flute, _ = gen_clip(ClipSpec(melody_seed=seed, instrument='flute'), vocab)
            other, _ = gen_clip(ClipSpec(melody_seed=seed + 500, instrument='piano'), vocab)
            same_melody = cqt1_pcc(resynthesize(piano), resynthesize(flute))
            assert same_melody > 0.9
            assert cqt1_pcc(resynthesize(piano), resynthesize(other)) < same_melody
