import hashlib
import logging
import math
import statistics
import time
from collections.abc import Iterable
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass
from enum import StrEnum
from typing import Literal, Self

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.services.codec_model import (
    CodecModel,
    ContextPair,
    FeatureState,
    LatentCode,
    RateEstimate,
    ReferenceOrigin,
    estimate_rate,
)
from app.services.media_io import Frame, NormalizedFrame, Sequence, denormalize, normalize
from app.services.metrics import PsnrResult, psnr_yuv420
from app.services.quantization import DEFAULT_QP_BIAS, MAX_QP, QpPair, QpSchedule, packet_qp_pair

logger = logging.getLogger(__name__)


class CodingConfigError(ValueError):
    pass


class StreamError(Exception):
    pass


class CodingMode(StrEnum):
    UNIFIED = "unified"
    DIVIDED_REFRESH = "divided_refresh"


class CodingConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    base_qp: int = Field(default=32, ge=0, le=MAX_QP)
    intra_period: int = -1
    refresh_period: int = Field(default=0, ge=0)
    mode: CodingMode = CodingMode.UNIFIED
    qp_bias: tuple[int, ...] = DEFAULT_QP_BIAS
    frames_per_packet: Literal[1, 2] = 2
    separate_intra: bool = False

    @field_validator("intra_period")
    @classmethod
    def _check_intra_period(cls, value: int) -> int:
        if value != -1 and value <= 0:
            raise ValueError(f"intra_period must be -1 or positive, got {value}")
        return value

    @model_validator(mode="after")
    def _unified_has_no_refresh(self) -> Self:
        if self.mode is CodingMode.UNIFIED and self.refresh_period:
            raise CodingConfigError(
                f"Unified mode never refreshes references; got refresh_period={self.refresh_period}"
            )
        return self

    @model_validator(mode="after")
    def _separate_intra_is_divided(self) -> Self:
        if self.separate_intra and self.mode is not CodingMode.DIVIDED_REFRESH:
            raise CodingConfigError("A separate intra model is only used in divided_refresh mode")
        return self

    def schedule(self) -> QpSchedule:
        return QpSchedule(base_qp=self.base_qp, bias=self.qp_bias)

    def packet_frames(self, packet_index: int) -> range:
        n = self.frames_per_packet
        return range(n * packet_index, n * packet_index + n)

    def packet_qp(self, packet_index: int) -> QpPair:
        return packet_qp_pair(self.schedule(), packet_index, self.frames_per_packet)


@dataclass(frozen=True)
class PairPacket:
    pair_index: int
    latent: LatentCode
    qp_pair: QpPair
    rate: RateEstimate
    frame_count: Literal[1, 2] = 2

    @property
    def frame_bits(self) -> list[float]:
        # a flushed single frame carries the whole packet
        if self.frame_count == 1:
            return [self.rate.total_bits]
        return list(self.rate.per_frame_bits)

    def to_record(self) -> "PacketRecord":
        return PacketRecord(
            pair_index=self.pair_index,
            qp_pair=self.qp_pair,
            frame_count=self.frame_count,
            values=self.latent.values.detach().cpu(),
            prior_digest=prior_digest(self.latent.prior_mean, self.latent.prior_scale),
        )


@dataclass(frozen=True)
class PacketRecord:
    """What travels to the decoder: everything but the prior itself."""

    pair_index: int
    qp_pair: QpPair
    frame_count: Literal[1, 2]
    values: torch.Tensor
    prior_digest: bytes


def prior_digest(mean: torch.Tensor, scale: torch.Tensor) -> bytes:
    digest = hashlib.sha256()
    for tensor in (mean, scale):
        digest.update(tensor.detach().to("cpu", torch.float32).contiguous().numpy().tobytes())
    return digest.digest()[:16]


@dataclass
class SequenceReport:
    name: str
    width: int
    height: int
    per_frame_bits: list[float]
    per_frame_quality: list[PsnrResult]
    reconstructions: Sequence

    @property
    def per_frame_psnr(self) -> list[float]:
        return [q.psnr_yuv for q in self.per_frame_quality]

    @property
    def pixels_per_frame(self) -> int:
        return self.width * self.height

    @property
    def per_frame_bpp(self) -> list[float]:
        return [bits / self.pixels_per_frame for bits in self.per_frame_bits]

    @property
    def total_bits(self) -> float:
        return math.fsum(self.per_frame_bits)

    @property
    def total_bpp(self) -> float:
        return self.total_bits / (len(self.per_frame_bits) * self.pixels_per_frame)

    @property
    def mean_psnr(self) -> float:
        return math.fsum(self.per_frame_psnr) / len(self.per_frame_psnr)

    @property
    def peak_bpp(self) -> float:
        return max(self.per_frame_bpp)

    @property
    def bpp_stdev(self) -> float:
        bpp = self.per_frame_bpp
        return statistics.pstdev(bpp) if len(bpp) > 1 else 0.0


def refresh_reference(model: CodecModel, reconstructed_frame: NormalizedFrame) -> FeatureState:
    """Rebuild the reference from a decoded image alone, dropping all prior features."""
    return model.make_reference_from_frame(reconstructed_frame, ReferenceOrigin.REFRESH)


class ReferenceBuffer:
    """Reference state shared by the encoder and decoder paths.

    Applies intra-period resets and refresh points before a pair, hands out the
    contexts for it, and absorbs the decoder's fused feature afterwards. With a
    separate intra model, the first pair, intra-period resets and refresh points
    are coded by that model from its blank reference, and the main model resumes
    from its adaptor applied to the last reconstruction.
    """

    def __init__(
        self,
        model: CodecModel,
        config: CodingConfig,
        height: int,
        width: int,
        intra_model: CodecModel | None = None,
    ) -> None:
        if config.separate_intra and intra_model is None:
            raise CodingConfigError("separate_intra is set but no intra model was given")
        self._model = model
        self._intra_model = intra_model if config.separate_intra else None
        self._config = config
        self._height = height
        self._width = width
        self.state = model.init_reference_blank(height, width)
        self.coder = model
        self.intra_pair = False
        self.last_reconstruction: NormalizedFrame | None = None
        self.origins: list[ReferenceOrigin] = []
        self.context_sources: list[FeatureState] = []

    def _hits(self, period: int, pair_index: int) -> bool:
        return period > 0 and any(i % period == 0 for i in self._config.packet_frames(pair_index))

    def begin_pair(self, pair_index: int) -> ContextPair:
        cfg = self._config
        reset = pair_index > 0 and self._hits(cfg.intra_period, pair_index)
        refresh = (
            pair_index > 0
            and not reset
            and cfg.mode is CodingMode.DIVIDED_REFRESH
            and self._hits(cfg.refresh_period, pair_index)
        )
        self.coder = self._model
        self.intra_pair = self._intra_model is not None and (pair_index == 0 or reset or refresh)
        if self.intra_pair:
            assert self._intra_model is not None
            self.coder = self._intra_model
            self.state = self._intra_model.init_reference_blank(self._height, self._width)
        elif reset:
            self.state = self._model.init_reference_blank(self._height, self._width)
        elif refresh:
            assert self.last_reconstruction is not None
            self.state = refresh_reference(self._model, self.last_reconstruction)
        self.origins.append(self.state.origin)
        self.context_sources.append(self.state)
        return self.coder.extract_contexts(self.state)

    def end_pair(self, state: FeatureState, last_reconstruction: NormalizedFrame) -> None:
        if self.intra_pair:
            # intra features never enter the main model's buffer
            state = refresh_reference(self._model, last_reconstruction)
        self.state = state
        self.last_reconstruction = last_reconstruction


def _decode_with(
    buffer: ReferenceBuffer,
    latent: LatentCode,
    ctx: ContextPair,
    qp_pair: QpPair,
    frame_count: Literal[1, 2],
) -> tuple[NormalizedFrame, NormalizedFrame]:
    x_hat_t, x_hat_t1, state = buffer.coder.decode_pair(latent, ctx, qp_pair)
    buffer.end_pair(state, x_hat_t1 if frame_count == 2 else x_hat_t)
    return x_hat_t, x_hat_t1


class PairStreamer:
    """Buffers one frame, then codes each pair as soon as its second frame arrives.

    With ``frames_per_packet=1`` every frame is coded on arrival, without the
    one-frame delay.
    """

    def __init__(
        self,
        model: CodecModel,
        config: CodingConfig,
        width: int,
        height: int,
        intra_model: CodecModel | None = None,
    ) -> None:
        self._model = model
        self._config = config
        self.width = width
        self.height = height
        with torch.no_grad():
            self.buffer = ReferenceBuffer(model, config, height, width, intra_model=intra_model)
        self.pending: Frame | None = None
        self.emitted_pairs = 0
        self.reconstructions: list[Frame] = []

    @property
    def state(self) -> FeatureState:
        return self.buffer.state

    def _check(self, frame: Frame) -> None:
        if (frame.width, frame.height) != (self.width, self.height):
            raise StreamError(
                f"Frame {frame.width}x{frame.height} does not match stream {self.width}x{self.height}"
            )

    def push_frame(self, frame: Frame) -> PairPacket | None:
        self._check(frame)
        if self._config.frames_per_packet == 1:
            return self._code_pair(frame, frame, frame_count=1)
        if self.pending is None:
            self.pending = frame
            return None
        first, self.pending = self.pending, None
        return self._code_pair(first, frame, frame_count=2)

    def flush(self) -> PairPacket | None:
        if self.pending is None:
            return None
        last, self.pending = self.pending, None
        return self._code_pair(last, last, frame_count=1)

    @torch.no_grad()
    def _code_pair(self, first: Frame, second: Frame, frame_count: Literal[1, 2]) -> PairPacket:
        pair_index = self.emitted_pairs
        qp_pair = self._config.packet_qp(pair_index)
        ctx = self.buffer.begin_pair(pair_index)
        coder = self.buffer.coder
        device = coder.device
        latent = coder.encode_pair(normalize(first).to(device), normalize(second).to(device), ctx, qp_pair)
        rate = estimate_rate(latent, coder.config.p_floor)
        x_hat_t, x_hat_t1 = _decode_with(self.buffer, latent, ctx, qp_pair, frame_count)
        self.reconstructions.append(denormalize(x_hat_t))
        if frame_count == 2:
            self.reconstructions.append(denormalize(x_hat_t1))
        self.emitted_pairs += 1
        return PairPacket(
            pair_index=pair_index,
            latent=latent,
            qp_pair=qp_pair,
            rate=rate,
            frame_count=frame_count,
        )


def encode_sequence(
    model: CodecModel,
    sequence: Sequence,
    config: CodingConfig,
    intra_model: CodecModel | None = None,
) -> tuple[list[PairPacket], SequenceReport]:
    start = time.monotonic()
    streamer = PairStreamer(model, config, sequence.width, sequence.height, intra_model=intra_model)
    packets: list[PairPacket] = []
    for frame in sequence.frames:
        packet = streamer.push_frame(frame)
        if packet is not None:
            packets.append(packet)
    tail = streamer.flush()
    if tail is not None:
        packets.append(tail)

    per_frame_bits = [bits for packet in packets for bits in packet.frame_bits]
    quality = [
        psnr_yuv420(src, rec)
        for src, rec in zip(sequence.frames, streamer.reconstructions, strict=True)
    ]
    report = SequenceReport(
        name=sequence.name,
        width=sequence.width,
        height=sequence.height,
        per_frame_bits=per_frame_bits,
        per_frame_quality=quality,
        reconstructions=Sequence(
            frames=streamer.reconstructions,
            name=f"{sequence.name}_rec",
            frame_rate=sequence.frame_rate,
        ),
    )
    logger.info(
        "sequence encoded",
        extra={
            "sequence": sequence.name,
            "frames": len(sequence),
            "pairs": len(packets),
            "base_qp": config.base_qp,
            "mode": config.mode.value,
            "frames_per_packet": config.frames_per_packet,
            "separate_intra": config.separate_intra,
            "total_bpp": report.total_bpp,
            "mean_psnr": report.mean_psnr,
            "duration_ms": int((time.monotonic() - start) * 1000),
        },
    )
    return packets, report


def _as_records(packets: Iterable[PairPacket | PacketRecord]) -> list[PacketRecord]:
    return [p.to_record() if isinstance(p, PairPacket) else p for p in packets]


@torch.no_grad()
def decode_sequence(
    model: CodecModel,
    packets: SequenceABC[PairPacket | PacketRecord],
    dims: tuple[int, int],
    config: CodingConfig,
    name: str = "decoded",
    verify_prior: bool = True,
    intra_model: CodecModel | None = None,
) -> Sequence:
    width, height = dims
    buffer = ReferenceBuffer(model, config, height, width, intra_model=intra_model)
    frames: list[Frame] = []
    for expected, record in enumerate(_as_records(packets)):
        if record.pair_index != expected:
            raise StreamError(f"Expected pair {expected}, got pair {record.pair_index}")
        ctx = buffer.begin_pair(expected)
        coder = buffer.coder
        mean, scale = coder.prior(ctx, record.qp_pair)
        if verify_prior and prior_digest(mean, scale) != record.prior_digest:
            raise StreamError(
                f"Entropy prior of pair {expected} differs from the encoder's; wrong model?"
            )
        latent = LatentCode(values=record.values.to(coder.device), prior_mean=mean, prior_scale=scale)
        x_hat_t, x_hat_t1 = _decode_with(buffer, latent, ctx, record.qp_pair, record.frame_count)
        frames.append(denormalize(x_hat_t))
        if record.frame_count == 2:
            frames.append(denormalize(x_hat_t1))
    return Sequence(frames=frames, name=name)
