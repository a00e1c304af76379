"""Hybrid-reference, multi-rate training over cascaded frame groups."""

import bisect
import csv
import logging
import math
from collections import deque
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Literal, Self

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.services.checkpoint import TrainingState, config_digest, save_checkpoint
from app.services.codec_model import CodecModel, FeatureState, ReferenceOrigin, estimate_rate
from app.services.media_io import (
    FrameGroup,
    NormalizedFrame,
    Sequence,
    extract_training_pairs,
    normalize,
    stack_frames,
)
from app.services.quantization import (
    DEFAULT_QP_BIAS,
    MAX_QP,
    QpSchedule,
    lambda_for_qp,
    packet_qp_pair,
)

logger = logging.getLogger(__name__)

LONG_GROUP_LEN = 16
_LOG_FIELDS = ("step", "loss", "rate", "distortion", "qp", "reference_mode")


class TrainingConfigError(ValueError):
    pass


class NonFiniteLossError(ArithmeticError):
    pass


class ReferenceMode(StrEnum):
    BLANK = "blank"
    GT_PREVIOUS = "gt_previous"
    NOISY_GT = "noisy_gt"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    group_len: int = 8
    qp_bias: tuple[int, ...] = DEFAULT_QP_BIAS
    hierarchical_weights: tuple[float, ...] = (0.5, 1.2, 0.5, 0.9, 0.5, 0.9, 0.5, 0.9)
    yuv_loss_weights: tuple[float, float, float] = (6 / 8, 1 / 8, 1 / 8)
    noise_sigma_range: tuple[float, float] = (0.01, 0.10)
    reference_mode_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    lambda_min: float = Field(default=0.4, gt=0)
    lambda_max: float = Field(default=768.0, gt=0)
    steps: int = Field(default=2000, ge=0)
    fine_tune_steps: int = Field(default=0, ge=0)
    batch: int = Field(default=4, gt=0)
    patch_size: int = Field(default=64, gt=0)
    lr: float = Field(default=1e-4, gt=0)
    lr_milestones: tuple[int, ...] = ()
    lr_gamma: float = Field(default=0.1, gt=0)
    grad_clip: float | None = 1.0
    fixed_base_qp: int | None = Field(default=None, ge=0, le=MAX_QP)
    checkpoint_every: int = Field(default=500, gt=0)
    log_window: int = Field(default=100, gt=0)
    seed: int = 0
    frames_per_packet: Literal[1, 2] = 2
    intra_only: bool = False

    @field_validator("group_len")
    @classmethod
    def _check_group_len(cls, value: int) -> int:
        if value <= 0 or value % 8:
            raise ValueError(f"group_len must be a positive multiple of 8, got {value}")
        return value

    @field_validator("hierarchical_weights")
    @classmethod
    def _check_weights(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if len(value) != 8 or any(w < 0 for w in value):
            raise ValueError(f"hierarchical_weights must be 8 non-negative values, got {list(value)}")
        return value

    @field_validator("yuv_loss_weights")
    @classmethod
    def _check_yuv(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(w <= 0 for w in value) or not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"yuv_loss_weights must be positive and sum to 1, got {list(value)}")
        return value

    @field_validator("reference_mode_probs")
    @classmethod
    def _check_probs(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        _validate_probs(value)
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> Self:
        lo, hi = self.noise_sigma_range
        if lo < 0 or hi < lo:
            raise ValueError(f"noise_sigma_range must satisfy 0 <= lo <= hi, got {[lo, hi]}")
        if self.lambda_max <= self.lambda_min:
            raise ValueError("lambda_max must exceed lambda_min so lambda increases with QP")
        if self.intra_only and self.reference_mode_probs[0] != 1.0:
            raise ValueError("intra_only trains from blank references; set reference_mode_probs to (1, 0, 0)")
        return self

    def schedule(self, base_qp: int) -> QpSchedule:
        return QpSchedule(base_qp=base_qp, bias=self.qp_bias)

    def lam(self, qp: int) -> float:
        return lambda_for_qp(qp, self.lambda_min, self.lambda_max)


def _validate_probs(probs: SequenceABC[float]) -> None:
    if len(probs) != len(ReferenceMode) or any(p < 0 for p in probs):
        raise TrainingConfigError(f"Need {len(ReferenceMode)} non-negative probabilities, got {list(probs)}")
    if abs(math.fsum(probs) - 1.0) > 1e-9:
        raise TrainingConfigError(f"Reference mode probabilities sum to {math.fsum(probs)}, not 1")


def sample_base_qp(rng: np.random.Generator) -> int:
    return int(rng.integers(0, MAX_QP + 1))


def sample_reference_mode(rng: np.random.Generator, probs: SequenceABC[float]) -> ReferenceMode:
    _validate_probs(probs)
    modes = list(ReferenceMode)
    return modes[int(rng.choice(len(modes), p=np.asarray(probs, dtype=np.float64)))]


def build_initial_reference(
    model: CodecModel,
    mode: ReferenceMode,
    prev_frame: NormalizedFrame | None,
    rng: np.random.Generator,
    sigma_range: tuple[float, float],
    height: int | None = None,
    width: int | None = None,
    batch: int = 1,
) -> FeatureState:
    if mode is ReferenceMode.BLANK:
        if prev_frame is not None:
            height, width, batch = prev_frame.height, prev_frame.width, prev_frame.y.shape[0]
        if height is None or width is None:
            raise TrainingConfigError("A blank reference needs the frame size")
        return model.init_reference_blank(height, width, batch=batch)
    if prev_frame is None:
        raise TrainingConfigError(f"Reference mode '{mode}' needs the previous frame")
    if mode is ReferenceMode.GT_PREVIOUS:
        return model.make_reference_from_frame(prev_frame, ReferenceOrigin.TRAINING_GT)

    sigma = float(rng.uniform(*sigma_range))
    generator = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))

    def corrupt(plane: torch.Tensor) -> torch.Tensor:
        noise = torch.randn(plane.shape, generator=generator) * sigma
        return torch.clamp(plane + noise.to(plane.device), 0.0, 1.0)

    noisy = NormalizedFrame(y=corrupt(prev_frame.y), u=corrupt(prev_frame.u), v=corrupt(prev_frame.v))
    return model.make_reference_from_frame(noisy, ReferenceOrigin.TRAINING_NOISY)


def yuv_mse(
    source: NormalizedFrame,
    reconstruction: NormalizedFrame,
    weights: tuple[float, float, float],
) -> torch.Tensor:
    """Weighted per-plane MSE, chroma at its native half resolution."""
    w_y, w_u, w_v = weights
    return (
        w_y * torch.mean((source.y - reconstruction.y) ** 2)
        + w_u * torch.mean((source.u - reconstruction.u) ** 2)
        + w_v * torch.mean((source.v - reconstruction.v) ** 2)
    )


@dataclass
class FrameTerm:
    index: int
    qp: int
    weight: float
    lam: float
    distortion: torch.Tensor
    rate: torch.Tensor

    @property
    def value(self) -> torch.Tensor:
        return self.weight * (self.lam * self.distortion + self.rate)


@dataclass
class GroupLoss:
    loss: torch.Tensor
    terms: list[FrameTerm]
    base_qp: int
    mode: ReferenceMode

    @property
    def rate_term(self) -> float:
        return math.fsum(t.weight * float(t.rate.detach()) for t in self.terms)

    @property
    def distortion_term(self) -> float:
        return math.fsum(t.weight * t.lam * float(t.distortion.detach()) for t in self.terms)


def group_loss(
    model: CodecModel,
    frames: SequenceABC[NormalizedFrame],
    base_qp: int,
    ref_mode: ReferenceMode,
    config: TrainConfig,
    previous: NormalizedFrame | None = None,
    rng: np.random.Generator | None = None,
    group_len: int | None = None,
) -> GroupLoss:
    """Code the group packet by packet, references flowing between packets with gradients.

    ``intra_only`` restarts every packet from the blank reference;
    ``frames_per_packet=1`` codes each frame on its own, duplicated into both
    pair slots, and charges it the packet's full rate.
    """
    expected = group_len or config.group_len
    if len(frames) != expected:
        raise TrainingConfigError(f"Group must hold {expected} frames, got {len(frames)}")
    rng = rng or np.random.default_rng(config.seed)
    first = frames[0]
    batch = int(first.y.shape[0])
    pixels = batch * first.height * first.width
    state = build_initial_reference(
        model,
        ref_mode,
        previous,
        rng,
        config.noise_sigma_range,
        height=first.height,
        width=first.width,
        batch=batch,
    )
    schedule = config.schedule(base_qp)
    per_packet = config.frames_per_packet
    terms: list[FrameTerm] = []
    for packet_index in range(len(frames) // per_packet):
        if config.intra_only and packet_index:
            state = model.init_reference_blank(first.height, first.width, batch=batch)
        qp_pair = packet_qp_pair(schedule, packet_index, per_packet)
        ctx = model.extract_contexts(state)
        sources = frames[per_packet * packet_index : per_packet * (packet_index + 1)]
        latent = model.encode_pair(sources[0], sources[-1], ctx, qp_pair)
        rate = estimate_rate(latent, model.config.p_floor)
        x_hat_t, x_hat_t1, state = model.decode_pair(latent, ctx, qp_pair)
        share = rate.bits / per_packet / pixels
        outputs = ((x_hat_t, qp_pair.qp_first), (x_hat_t1, qp_pair.qp_second))
        for offset, (source, (recon, qp)) in enumerate(zip(sources, outputs)):
            index = per_packet * packet_index + offset
            terms.append(
                FrameTerm(
                    index=index,
                    qp=qp,
                    weight=config.hierarchical_weights[index % 8],
                    lam=config.lam(qp),
                    distortion=yuv_mse(source, recon, config.yuv_loss_weights),
                    rate=share,
                )
            )
    loss = torch.stack([t.value for t in terms]).sum()
    return GroupLoss(loss=loss, terms=terms, base_qp=base_qp, mode=ref_mode)


@dataclass
class TrainResult:
    checkpoints: list[Path]
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def smoothed(values: SequenceABC[float], window: int) -> list[float]:
    """Trailing moving average."""
    out: list[float] = []
    acc: deque[float] = deque(maxlen=window)
    for value in values:
        acc.append(value)
        out.append(math.fsum(acc) / len(acc))
    return out


def _build_pool(
    sequences: SequenceABC[Sequence],
    patch_size: int,
    group_len: int,
    rng: np.random.Generator,
) -> list[FrameGroup]:
    pool: list[FrameGroup] = []
    for sequence in sequences:
        if len(sequence) >= group_len:
            patch = min(patch_size, sequence.width, sequence.height)
            pool.extend(extract_training_pairs(sequence, patch - patch % 8, group_len, rng))
    return pool


def _stack_batch(
    groups: SequenceABC[FrameGroup],
    device: torch.device,
) -> tuple[list[NormalizedFrame], NormalizedFrame | None]:
    length = len(groups[0].frames)
    frames = [stack_frames([normalize(g.frames[i]) for g in groups]).to(device) for i in range(length)]
    previous: NormalizedFrame | None = None
    if all(g.previous is not None for g in groups):
        previous = stack_frames([normalize(g.previous) for g in groups if g.previous is not None]).to(device)
    return frames, previous


def _lr_factor(milestones: tuple[int, ...], gamma: float) -> "LrFactor":
    return LrFactor(tuple(sorted(milestones)), gamma)


@dataclass(frozen=True)
class LrFactor:
    milestones: tuple[int, ...]
    gamma: float

    def __call__(self, step: int) -> float:
        return float(self.gamma ** bisect.bisect_right(self.milestones, step))


def train(
    model: CodecModel,
    dataset: SequenceABC[Sequence],
    config: TrainConfig,
    out_dir: Path,
    resume: TrainingState | None = None,
) -> TrainResult:
    if not dataset:
        raise TrainingConfigError("Training dataset is empty")
    pool_rng = np.random.default_rng([config.seed, 1])
    pools = {config.group_len: _build_pool(dataset, config.patch_size, config.group_len, pool_rng)}
    if not pools[config.group_len]:
        raise TrainingConfigError(f"No sequence in the dataset has {config.group_len} frames")
    if config.fine_tune_steps:
        pools[LONG_GROUP_LEN] = _build_pool(dataset, config.patch_size, LONG_GROUP_LEN, pool_rng)
        if not pools[LONG_GROUP_LEN]:
            raise TrainingConfigError(f"Fine-tuning needs sequences of {LONG_GROUP_LEN} frames")
    # groups that start after frame 0 and so carry a preceding frame
    with_previous = {
        length: np.flatnonzero([g.previous is not None for g in pool]) for length, pool in pools.items()
    }

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model.train()
    device = model.device
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _lr_factor(config.lr_milestones, config.lr_gamma))
    digest = config_digest(config.model_dump(mode="json"))
    start_step = 0
    if resume is not None:
        if resume.config_digest != digest:
            logger.warning(
                "resuming with a different training config",
                extra={"checkpoint_digest": resume.config_digest, "config_digest": digest},
            )
        if resume.optimizer is not None:
            optimizer.load_state_dict(resume.optimizer)
        if resume.scheduler is not None:
            scheduler.load_state_dict(resume.scheduler)
        if "numpy" in resume.rng:
            rng.bit_generator.state = resume.rng["numpy"]
        if "torch" in resume.rng:
            torch.set_rng_state(resume.rng["torch"])
        start_step = resume.step

    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"
    fresh_log = resume is None or not log_path.exists()
    total_steps = config.steps + config.fine_tune_steps
    window: deque[float] = deque(maxlen=config.log_window)
    result = TrainResult(checkpoints=[])

    with log_path.open("w" if fresh_log else "a", newline="") as log_fh:
        writer = csv.writer(log_fh)
        if fresh_log:
            writer.writerow(_LOG_FIELDS)
        for step in range(start_step, total_steps):
            group_len = config.group_len if step < config.steps else LONG_GROUP_LEN
            pool = pools[group_len]
            base_qp = config.fixed_base_qp if config.fixed_base_qp is not None else sample_base_qp(rng)
            mode = sample_reference_mode(rng, config.reference_mode_probs)
            candidates: int | np.ndarray = len(pool)
            if mode is not ReferenceMode.BLANK:
                if len(with_previous[group_len]):
                    candidates = with_previous[group_len]
                else:
                    logger.debug("no group has a preceding frame; using blank reference", extra={"step": step})
                    mode = ReferenceMode.BLANK
            picks = rng.choice(candidates, size=config.batch)
            groups = [pool[int(i)] for i in picks]
            frames, previous = _stack_batch(groups, device)

            outcome = group_loss(model, frames, base_qp, mode, config, previous, rng, group_len=group_len)
            loss_value = float(outcome.loss.detach())
            if not math.isfinite(loss_value):
                batch_ids = [g.identifier for g in groups]
                logger.error(
                    "non-finite loss",
                    extra={"step": step, "batch": batch_ids, "qp": base_qp, "reference_mode": mode.value},
                )
                raise NonFiniteLossError(f"Loss {loss_value} at step {step} for batch {batch_ids}")

            optimizer.zero_grad(set_to_none=True)
            outcome.loss.backward()  # type: ignore[no-untyped-call]
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            scheduler.step()

            window.append(loss_value)
            result.losses.append(loss_value)
            writer.writerow([step, loss_value, outcome.rate_term, outcome.distortion_term, base_qp, mode.value])
            done = step + 1
            if done % 50 == 0 or done == total_steps:
                log_fh.flush()
                logger.info(
                    "training step",
                    extra={
                        "step": done,
                        "loss": loss_value,
                        "running_loss": math.fsum(window) / len(window),
                        "rate": outcome.rate_term,
                        "distortion": outcome.distortion_term,
                        "qp": base_qp,
                        "reference_mode": mode.value,
                        "group_len": group_len,
                    },
                )
            if done % config.checkpoint_every == 0 or done == total_steps:
                state = TrainingState(
                    step=done,
                    config_digest=digest,
                    running_loss=math.fsum(window) / len(window),
                    optimizer=optimizer.state_dict(),
                    scheduler=scheduler.state_dict(),
                    rng={"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()},
                )
                result.checkpoints.append(save_checkpoint(out_dir / f"step_{done:06d}.pt", model, state))

    model.eval()
    return result
