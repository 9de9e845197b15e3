import numpy as np
import pytest
import torch

from steermusic.diffusion import DTYPE
from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.training import (ReferenceSet, TrainingConfig, dpm_loss, dpm_loss_and_param_grads,
                                 evaluate_dpm_loss, personalize, textual_inversion, train)


@pytest.fixture
def dataset(vocab, randn):
    """Two prompts, each with a fixed mean plus small jitter."""
    conds = [vocab.condition(instrument='piano'), vocab.condition(instrument='flute', genre='jazz')]
    means = [randn(8, 16, seed=100), randn(8, 16, seed=101)]
    return [(means[i % 2] + 0.05 * randn(8, 16, seed=i), conds[i % 2]) for i in range(8)]


@pytest.fixture
def concept(small_params, as_spectrogram, randn):
    token_id = small_params.register_concept('sks')
    cond = small_params.vocabulary.condition_from_ids([token_id])
    items = [(as_spectrogram(randn(8, 16, seed=200 + i)), cond) for i in range(3)]
    return ReferenceSet('sks', token_id, items)


def weights_equal(a, b):
    wa, wb = a.named_weights(), b.named_weights()
    return wa.keys() == wb.keys() and all(torch.equal(wa[k], wb[k]) for k in wa)


class TestDpmLoss:
    def test_exact_predictor_has_zero_loss(self, sched, dataset):
        x0 = torch.stack([x for x, _ in dataset])
        conds = [c for _, c in dataset]

        def oracle(x_t, token_ids, t, overrides=None):
            a = sched.alpha_bar[t].reshape(-1, 1, 1)
            return (x_t - torch.sqrt(a) * x0) / torch.sqrt(1.0 - a), None

        loss = dpm_loss(oracle, x0, conds, sched, torch.Generator().manual_seed(0))
        assert float(loss) < 1e-20

    def test_random_network_has_positive_loss(self, sched, small_params, dataset):
        x0 = torch.stack([x for x, _ in dataset])
        loss = dpm_loss(small_params.network, x0, [c for _, c in dataset], sched,
                        torch.Generator().manual_seed(0))
        assert float(loss) > 0.0

    def test_prompt_count_must_match(self, sched, small_params, dataset):
        x0 = torch.stack([x for x, _ in dataset])
        with pytest.raises(InvalidArgumentError):
            dpm_loss(small_params.network, x0, [dataset[0][1]], sched, torch.Generator())

    def test_empty_batch(self, sched, small_params):
        with pytest.raises(InvalidArgumentError):
            dpm_loss_and_param_grads(small_params, [], sched, torch.Generator())

    def test_parameter_gradients_match_finite_differences(self, sched, small_params, dataset):
        batch = dataset[:4]
        x0 = torch.stack([x for x, _ in batch])
        conds = [c for _, c in batch]

        def loss_now():
            with torch.no_grad():
                return float(dpm_loss(small_params.network, x0, conds, sched,
                                      torch.Generator().manual_seed(3)))

        _, grads = dpm_loss_and_param_grads(small_params, batch, sched,
                                            torch.Generator().manual_seed(3))
        named = dict(small_params.network.named_parameters())
        names = sorted(named)
        rng = np.random.default_rng(0)
        h = 1e-6
        numeric, exact = [], []
        for _ in range(50):
            name = names[int(rng.integers(len(names)))]
            flat = named[name].data.view(-1)
            idx = int(rng.integers(flat.numel()))
            original = float(flat[idx])
            flat[idx] = original + h
            plus = loss_now()
            flat[idx] = original - h
            minus = loss_now()
            flat[idx] = original
            numeric.append((plus - minus) / (2 * h))
            exact.append(float(grads[name].view(-1)[idx]))
        numeric, exact = np.array(numeric), np.array(exact)
        assert np.linalg.norm(numeric - exact) / np.linalg.norm(exact) < 1e-4

    def test_gradients_cover_every_parameter(self, sched, small_params, dataset):
        _, grads = dpm_loss_and_param_grads(small_params, dataset, sched,
                                            torch.Generator().manual_seed(0))
        assert set(grads) == {n for n, _ in small_params.network.named_parameters()}


class TestTrain:
    def test_zero_steps_returns_unchanged_copy(self, sched, small_params, dataset):
        run = train(dataset, TrainingConfig(steps=0), sched, small_params)
        assert run.losses == []
        assert run.params is not small_params
        assert weights_equal(run.params, small_params)

    def test_training_reduces_loss_and_leaves_input_alone(self, sched, small_params, dataset):
        before = small_params.copy()
        run = train(dataset, TrainingConfig(steps=150, lr=1e-2, batch=8, log_every=50), sched,
                    small_params)
        assert weights_equal(small_params, before)
        assert len(run.losses) == 150
        assert (evaluate_dpm_loss(run.params, dataset, sched, repeats=16)
                < evaluate_dpm_loss(small_params, dataset, sched, repeats=16))

    def test_training_is_deterministic(self, sched, small_params, dataset):
        config = TrainingConfig(steps=5, batch=4, seed=7)
        first = train(dataset, config, sched, small_params)
        second = train(dataset, config, sched, small_params)
        assert first.losses == second.losses
        assert weights_equal(first.params, second.params)

    def test_empty_dataset(self, sched, small_params):
        with pytest.raises(InvalidArgumentError):
            train([], TrainingConfig(steps=1), sched, small_params)

    @pytest.mark.parametrize('kwargs', [dict(steps=-1), dict(lr=0.0), dict(batch=0),
                                        dict(cond_drop=1.0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TrainingConfig(**kwargs)


class TestReferenceSet:
    def test_needs_clips(self):
        with pytest.raises(InvalidArgumentError):
            ReferenceSet('sks', 12, [])

    def test_prompts_must_carry_the_concept(self, vocab, as_spectrogram, randn):
        item = (as_spectrogram(randn(8, 16)), vocab.condition(instrument='piano'))
        with pytest.raises(InvalidArgumentError):
            ReferenceSet('sks', 12, [item])


class TestPersonalize:
    def test_zero_steps_returns_unchanged_copy(self, sched, small_params, concept):
        tuned = personalize(small_params, concept, sched, steps=0)
        assert tuned is not small_params
        assert weights_equal(tuned, small_params)

    def test_fits_the_references_without_touching_the_base(self, sched, small_params, concept):
        base = small_params.copy()
        tuned = personalize(small_params, concept, sched, steps=60, lr=1e-3)
        assert weights_equal(small_params, base)
        items = concept.training_items()
        assert (evaluate_dpm_loss(tuned, items, sched, repeats=16)
                < evaluate_dpm_loss(small_params, items, sched, repeats=16))

    def test_unregistered_concept(self, sched, small_params, as_spectrogram, randn):
        other = small_params.copy()
        other.register_concept('sks')
        cond = other.vocabulary.condition_from_ids([other.concept_id('sks')])
        refs = ReferenceSet('sks', other.concept_id('sks'), [(as_spectrogram(randn(8, 16)), cond)])
        with pytest.raises(InvalidStateError):
            personalize(small_params, refs, sched, steps=1)


class TestTextualInversion:
    def test_zero_steps_returns_initial_row(self, sched, small_params, concept):
        vector = textual_inversion(small_params, concept, sched, steps=0)
        row = small_params.network.token_embedding.weight[concept.concept_id].detach()
        assert torch.equal(vector, row)

    def test_only_the_embedding_moves(self, sched, small_params, concept):
        before = small_params.copy()
        vector = textual_inversion(small_params, concept, sched, steps=100, lr=1e-2)
        assert weights_equal(small_params, before)
        assert vector.shape == (small_params.architecture.embed_dim,)
        assert vector.dtype == DTYPE
        items = concept.training_items()
        learned = evaluate_dpm_loss(small_params, items, sched, repeats=16,
                                    overrides={concept.concept_id: vector})
        assert learned < evaluate_dpm_loss(small_params, items, sched, repeats=16)
