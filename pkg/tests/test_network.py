import json

import pytest
import torch

from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.network import (Architecture, DenoiserParams, load_checkpoint, save_checkpoint,
                                timestep_embedding)
from steermusic.prompts import CONCEPT_SLOT

from conftest import SMALL_ARCH


def test_initialize_is_seeded(vocab):
    a = DenoiserParams.initialize(vocab, SMALL_ARCH, seed=3).named_weights()
    b = DenoiserParams.initialize(vocab, SMALL_ARCH, seed=3).named_weights()
    c = DenoiserParams.initialize(vocab, SMALL_ARCH, seed=4).named_weights()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_architecture_validation():
    with pytest.raises(InvalidArgumentError):
        Architecture(bins=30, patch_bins=16)
    with pytest.raises(InvalidArgumentError):
        Architecture(channels=0)


def test_timestep_embedding_shape():
    emb = timestep_embedding(torch.tensor([1, 500]), 7)
    assert emb.shape == (2, 7)


def test_copy_is_independent(small_params):
    clone = small_params.copy()
    with torch.no_grad():
        next(clone.network.parameters()).add_(1.0)
    original = next(small_params.network.parameters())
    assert not torch.equal(original, next(clone.network.parameters()))


class TestConceptRegistration:
    def test_grows_table_and_keeps_existing_rows(self, small_params, vocab):
        before = small_params.network.token_embedding.weight.detach().clone()
        token_id = small_params.register_concept('sks')
        after = small_params.network.token_embedding.weight.detach()
        assert token_id == len(vocab)
        assert after.shape[0] == before.shape[0] + 1
        assert torch.equal(after[:-1], before)

    def test_new_row_is_instrument_mean(self, small_params, vocab):
        ids = vocab.ids_in_slot('instrument')
        expected = small_params.network.token_embedding.weight.detach()[ids].mean(dim=0)
        token_id = small_params.register_concept('sks')
        assert torch.allclose(small_params.network.token_embedding.weight[token_id].detach(), expected)

    def test_idempotent(self, small_params):
        first = small_params.register_concept('sks')
        size = small_params.network.token_embedding.num_embeddings
        assert small_params.register_concept('sks') == first
        assert small_params.network.token_embedding.num_embeddings == size

    def test_concept_id(self, small_params):
        token_id = small_params.register_concept('sks')
        assert small_params.concept_id('sks') == token_id
        assert small_params.vocabulary.slot_of(token_id) == CONCEPT_SLOT
        with pytest.raises(InvalidStateError):
            small_params.concept_id('other')

    def test_concept_prompt_runs(self, small_params, randn):
        from steermusic.denoiser import ToyDenoiser
        token_id = small_params.register_concept('sks')
        cond = small_params.vocabulary.condition_from_ids([token_id])
        eps = ToyDenoiser(small_params).predict_noise(randn(8, 16), cond, 10)
        assert eps.shape == (8, 16)


class TestOverrides:
    def test_override_replaces_embedding_row(self, small_params, vocab):
        net = small_params.network
        piano = vocab.token_id('instrument', 'piano')
        vector = torch.ones(SMALL_ARCH.embed_dim, dtype=torch.float64)
        emb = net.prompt_embedding([[piano]], {piano: vector})
        assert torch.allclose(emb[0], vector)

    def test_override_leaves_table_untouched(self, small_params, vocab):
        net = small_params.network
        piano = vocab.token_id('instrument', 'piano')
        before = net.token_embedding.weight.detach().clone()
        net.prompt_embedding([[piano]], {piano: torch.zeros(SMALL_ARCH.embed_dim, dtype=torch.float64)})
        assert torch.equal(net.token_embedding.weight.detach(), before)


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, small_params, tmp_path):
        small_params.register_concept('sks')
        path = save_checkpoint(small_params, tmp_path / 'model.json')
        loaded = load_checkpoint(path)
        assert loaded.architecture == small_params.architecture
        assert loaded.vocabulary.to_dict() == small_params.vocabulary.to_dict()
        original = small_params.named_weights()
        restored = loaded.named_weights()
        assert original.keys() == restored.keys()
        assert all(torch.equal(original[k], restored[k]) for k in original)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(tmp_path / 'absent.json')

    def test_wrong_format(self, tmp_path):
        path = tmp_path / 'other.json'
        path.write_text(json.dumps({'format': 'something-else', 'version': 1}))
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{')
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(path)
