import pytest
import torch

from steermusic import create_app
from steermusic.diffusion import DTYPE, make_schedule
from steermusic.network import Architecture, DenoiserParams
from steermusic.prompts import PromptVocabulary
from steermusic.spectrogram import Spectrogram, geometric_bins

# Small enough for finite-difference checks, same layout as the default
SMALL_ARCH = Architecture(frames=8, bins=16, patch_bins=4, channels=8, attention_dim=8,
                          embed_dim=8, num_res_blocks=1)


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def sched():
    return make_schedule(1000)


@pytest.fixture
def vocab():
    return PromptVocabulary()


@pytest.fixture
def small_params(vocab):
    return DenoiserParams.initialize(vocab, SMALL_ARCH, seed=0)


@pytest.fixture
def randn():
    """Seeded float64 normal tensors."""
    def make(*shape, seed=0):
        return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
    return make


@pytest.fixture
def as_spectrogram():
    def make(data):
        return Spectrogram(data, 0.03125, geometric_bins(data.shape[1], 80.0, 4000.0))
    return make


@pytest.fixture
def app(monkeypatch):
    for key in ('STEERMUSIC_OUTPUT_DIR', 'STEERMUSIC_WORKERS', 'STEERMUSIC_PROGRESS'):
        monkeypatch.delenv(key, raising=False)
    app = create_app({'TESTING': True})
    yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
