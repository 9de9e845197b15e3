import math

import numpy as np
import pytest
import torch

from steermusic.denoiser import AnalyticDenoiser, ToyDenoiser, feature_pullback, toy_predict_noise
from steermusic.diffusion import DTYPE, forward_diffuse
from steermusic.errors import (InvalidArgumentError, InvalidStateError, MissingConditionError,
                               UnsupportedCapabilityError)
from steermusic.prompts import PromptCondition


class TestAnalyticDenoiser:
    def test_point_mass_recovers_the_noise(self, sched, vocab, randn):
        cond = vocab.condition(instrument='flute')
        mu, eps = randn(4, 6, seed=1), randn(4, 6, seed=2)
        model = AnalyticDenoiser(sched, {cond: mu})
        x_t = forward_diffuse(mu, 250, eps, sched)
        assert torch.allclose(model.predict_noise(x_t, cond, 250), eps, atol=1e-10)

    def test_unknown_condition(self, sched, vocab, randn):
        model = AnalyticDenoiser(sched, {vocab.condition(instrument='flute'): randn(2, 2)})
        with pytest.raises(MissingConditionError):
            model.predict_noise(randn(2, 2), vocab.condition(instrument='piano'), 10)

    def test_t_zero_rejected(self, sched, vocab, randn):
        cond = vocab.condition(instrument='flute')
        model = AnalyticDenoiser(sched, {cond: randn(2, 2)})
        with pytest.raises(InvalidArgumentError):
            model.predict_noise(randn(2, 2), cond, 0)

    def test_gaussian_prediction_is_the_conditional_mean(self, sched, vocab):
        # Regress eps on x_t over joint samples; the line must match the predictor.
        cond = vocab.condition(instrument='flute')
        n, t, m = 100_000, 500, 0.7
        gen = torch.Generator().manual_seed(0)
        x0 = m + torch.randn(n, generator=gen, dtype=DTYPE)
        eps = torch.randn(n, generator=gen, dtype=DTYPE)
        x_t = forward_diffuse(x0, t, eps, sched)
        slope, intercept = np.polyfit(x_t.numpy(), eps.numpy(), 1)

        model = AnalyticDenoiser(sched, {cond: torch.full((3,), m, dtype=DTYPE)}, s2=1.0)
        points = torch.tensor([-2.0, 0.0, 2.0], dtype=DTYPE)
        predicted = model.predict_noise(points, cond, t).numpy()
        assert np.allclose(predicted, slope * points.numpy() + intercept, atol=0.02)

    def test_no_feature_capability(self, sched, vocab, randn):
        cond = vocab.condition(instrument='flute')
        model = AnalyticDenoiser(sched, {cond: randn(2, 2)})
        assert not model.supports_features
        with pytest.raises(UnsupportedCapabilityError):
            model.predict_with_features(randn(2, 2), cond, 10)
        with pytest.raises(UnsupportedCapabilityError):
            model.feature_pullback(randn(2, 2), cond, 10, randn(2, 2))


class TestToyDenoiser:
    def test_shapes_and_determinism(self, small_params, vocab, randn):
        cond = vocab.condition(instrument='piano', genre='jazz')
        x = randn(8, 16)
        eps, features = toy_predict_noise(small_params, x, cond, 100)
        again, _ = toy_predict_noise(small_params, x, cond, 100)
        assert eps.shape == (8, 16)
        assert features.shape == small_params.architecture.feature_shape
        assert torch.equal(eps, again)

    def test_wrong_input_shape(self, small_params, vocab, randn):
        with pytest.raises(InvalidArgumentError):
            toy_predict_noise(small_params, randn(16, 8), vocab.condition(instrument='piano'), 1)

    def test_unregistered_token(self, small_params, randn):
        with pytest.raises(InvalidStateError):
            ToyDenoiser(small_params).predict_noise(randn(8, 16), PromptCondition(frozenset({99})), 1)
        assert not ToyDenoiser(small_params).knows(PromptCondition(frozenset({99})))

    def test_null_prompt_is_known(self, small_params):
        assert ToyDenoiser(small_params).knows(PromptCondition.null())


class TestFeaturePullback:
    @pytest.fixture
    def cond(self, vocab):
        return vocab.condition(instrument='strings', genre='rock')

    def test_zero_cotangent(self, small_params, cond, randn):
        shape = small_params.architecture.feature_shape
        grad = feature_pullback(small_params, randn(8, 16), cond, 50, torch.zeros(shape, dtype=DTYPE))
        assert torch.equal(grad, torch.zeros(8, 16, dtype=DTYPE))

    def test_linear_in_cotangent(self, small_params, cond, randn):
        shape = small_params.architecture.feature_shape
        x, u, v = randn(8, 16, seed=1), randn(*shape, seed=2), randn(*shape, seed=3)
        combined = feature_pullback(small_params, x, cond, 50, 2.0 * u - 0.5 * v)
        separate = (2.0 * feature_pullback(small_params, x, cond, 50, u)
                    - 0.5 * feature_pullback(small_params, x, cond, 50, v))
        assert torch.allclose(combined, separate, atol=1e-10)

    def test_matches_finite_differences(self, small_params, cond, randn):
        shape = small_params.architecture.feature_shape
        x, u = randn(8, 16, seed=1), randn(*shape, seed=2)

        def objective(z):
            _, features = toy_predict_noise(small_params, z, cond, 50)
            return float(torch.sum(features * u))

        analytic = feature_pullback(small_params, x, cond, 50, u)
        samples = torch.randperm(x.numel(), generator=torch.Generator().manual_seed(4))[:50]
        h = 1e-6
        numeric, exact = [], []
        with torch.no_grad():
            for idx in samples.tolist():
                plus, minus = x.clone(), x.clone()
                plus.view(-1)[idx] += h
                minus.view(-1)[idx] -= h
                numeric.append((objective(plus) - objective(minus)) / (2 * h))
                exact.append(float(analytic.view(-1)[idx]))
        numeric, exact = np.array(numeric), np.array(exact)
        assert np.linalg.norm(numeric - exact) / np.linalg.norm(exact) < 1e-4

    def test_does_not_touch_weights(self, small_params, cond, randn):
        before = {k: v.clone() for k, v in small_params.named_weights().items()}
        shape = small_params.architecture.feature_shape
        feature_pullback(small_params, randn(8, 16), cond, 50, randn(*shape, seed=1))
        after = small_params.named_weights()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_cotangent_shape_checked(self, small_params, cond, randn):
        with pytest.raises(InvalidArgumentError):
            feature_pullback(small_params, randn(8, 16), cond, 50, randn(8, 16))


def test_analytic_closed_form(sched, vocab, randn):
    cond = vocab.condition(genre='ambient')
    mu, x_t = randn(3, 5, seed=1), randn(3, 5, seed=2)
    a = sched.alpha_bar_at(80)
    expected = (x_t - math.sqrt(a) * mu) / math.sqrt(1.0 - a)
    out = AnalyticDenoiser(sched, {cond: mu}).predict_noise(x_t, cond, 80)
    assert torch.allclose(out, expected)
