from pathlib import Path
from unittest.mock import patch

import pytest
import torch

from app.core.config import get_settings
from app.services.checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    TrainingState,
    config_digest,
    init_codec,
    load_checkpoint,
    save_checkpoint,
)
from app.services.codec_model import CodecModel


def test_save_then_load_restores_parameters_exactly(tmp_path: Path, model: CodecModel) -> None:
    path = save_checkpoint(tmp_path / "codec.pt", model)

    restored, training = load_checkpoint(path)

    assert training is None
    assert restored.config == model.config
    for (name, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items(), strict=True):
        assert torch.equal(a, b), name
    assert not restored.training


def test_training_state_survives_round_trip(tmp_path: Path, model: CodecModel) -> None:
    state = TrainingState(step=7, config_digest="abc", running_loss=1.5, rng={"torch": torch.get_rng_state()})

    _, training = load_checkpoint(save_checkpoint(tmp_path / "s.pt", model, state))

    assert training is not None
    assert training.step == 7
    assert training.running_loss == 1.5
    assert torch.equal(training.rng["torch"], state.rng["torch"])


def test_load_refuses_other_format_version(tmp_path: Path, model: CodecModel) -> None:
    path = tmp_path / "old.pt"
    torch.save({"format_version": 0, "model_config": {}, "state_dict": {}}, path)

    with pytest.raises(CheckpointVersionError, match="version 0"):
        load_checkpoint(path)


def test_load_wraps_unreadable_file(tmp_path: Path) -> None:
    path = tmp_path / "junk.pt"
    path.write_bytes(b"not a checkpoint")

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_load_missing_file_raises_file_not_found(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.pt")


def test_config_digest_is_order_independent() -> None:
    assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})
    assert len(config_digest({})) == 16


def test_init_codec_downloads_when_file_absent(tmp_path: Path, model: CodecModel) -> None:
    cached = save_checkpoint(tmp_path / "cache" / "codec.pt", model)
    with patch("app.services.checkpoint.hf_hub_download") as mock_download:
        mock_download.return_value = str(cached)
        loaded = init_codec(tmp_path, "codec.pt", repo_id="org/repo")

    mock_download.assert_called_once_with(
        repo_id="org/repo",
        filename="codec.pt",
        local_dir=tmp_path,
    )
    assert loaded.config == model.config


def test_init_codec_skips_download_when_file_present(tmp_path: Path, model: CodecModel) -> None:
    save_checkpoint(tmp_path / "codec.pt", model)
    with patch("app.services.checkpoint.hf_hub_download") as mock_download:
        init_codec(tmp_path, "codec.pt", repo_id="org/repo")

    mock_download.assert_not_called()


def test_init_codec_without_repo_raises(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError, match="no repository"):
        init_codec(tmp_path, "codec.pt")


async def test_lifespan_stores_codec_in_app_state(
    monkeypatch: pytest.MonkeyPatch, model: CodecModel
) -> None:
    from app.main import app, lifespan

    monkeypatch.setenv("API_KEY", "test-key")
    get_settings.cache_clear()
    try:
        with (
            patch("app.main.init_codec", return_value=model),
            patch("app.main.configure_logging"),
        ):
            async with lifespan(app):
                assert app.state.codec is model
                assert app.state.model_loaded is True
    finally:
        app.state.model_loaded = False
        get_settings.cache_clear()
