import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from huggingface_hub import hf_hub_download

from app.services.codec_model import CodecModel, ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainingState:
    step: int
    config_digest: str
    running_loss: float | None = None
    optimizer: dict[str, Any] | None = None
    scheduler: dict[str, Any] | None = None
    rng: dict[str, Any] = field(default_factory=dict)


def config_digest(values: dict[str, Any]) -> str:
    blob = json.dumps(values, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: Path, model: CodecModel, training: TrainingState | None = None) -> Path:
    payload: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.model_dump(),
        "state_dict": model.state_dict(),
    }
    if training is not None:
        payload["training"] = {
            "step": training.step,
            "config_digest": training.config_digest,
            "running_loss": training.running_loss,
            "optimizer": training.optimizer,
            "scheduler": training.scheduler,
            "rng": training.rng,
        }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.info("checkpoint written", extra={"path": str(path), "step": training.step if training else None})
    return path


def load_checkpoint(
    path: Path,
    device: torch.device | str = "cpu",
) -> tuple[CodecModel, TrainingState | None]:
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location=device, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint {path} has format version {version}, expected {FORMAT_VERSION}"
        )
    model = CodecModel(ModelConfig.model_validate(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.to(device).eval()
    training: TrainingState | None = None
    if "training" in payload:
        raw = payload["training"]
        training = TrainingState(
            step=int(raw["step"]),
            config_digest=str(raw["config_digest"]),
            running_loss=raw.get("running_loss"),
            optimizer=raw.get("optimizer"),
            scheduler=raw.get("scheduler"),
            rng=raw.get("rng") or {},
        )
    return model, training


def init_codec(
    checkpoint_dir: Path,
    filename: str,
    repo_id: str | None = None,
    device: str = "cpu",
) -> CodecModel:
    """Load a local checkpoint, fetching it from the Hugging Face Hub when absent."""
    path = checkpoint_dir / filename
    if not path.exists():
        if repo_id is None:
            raise FileNotFoundError(f"Checkpoint {path} not found and no repository configured")
        downloaded = hf_hub_download(repo_id=repo_id, filename=filename, local_dir=checkpoint_dir)
        path = Path(downloaded)
    model, _ = load_checkpoint(path, device=device)
    return model
