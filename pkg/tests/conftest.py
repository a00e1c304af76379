from collections.abc import AsyncGenerator

import pytest
import torch
from httpx import ASGITransport, AsyncClient

from app.core.config import get_settings
from app.main import app
from app.services.codec_model import CodecModel, ModelConfig
from app.services.media_io import Sequence, synthetic_clip

TEST_API_KEY = "test-api-key"


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(latent_channels=8, feature_channels=8, hidden_channels=8)


@pytest.fixture
def model(tiny_config: ModelConfig) -> CodecModel:
    torch.manual_seed(0)
    return CodecModel(tiny_config).eval()


@pytest.fixture
def clip() -> Sequence:
    return synthetic_clip(16, 16, 6, name="clip")


@pytest.fixture
def odd_clip() -> Sequence:
    return synthetic_clip(16, 16, 5, name="odd")


@pytest.fixture
async def client(
    monkeypatch: pytest.MonkeyPatch, model: CodecModel
) -> AsyncGenerator[AsyncClient, None]:
    monkeypatch.setenv("API_KEY", TEST_API_KEY)
    get_settings.cache_clear()
    app.state.model_loaded = True
    app.state.codec = model
    async with AsyncClient(
        transport=ASGITransport(app=app), base_url="http://test"
    ) as ac:
        yield ac
    app.state.model_loaded = False
    get_settings.cache_clear()
