"""The single network that codes every frame pair, intra or inter.

Frames enter as YUV420 planes. A pair is coded into one joint latent at 1/8
resolution, conditioned on contexts extracted from the fused feature the
decoder kept from the previous pair (or from the blank-image adaptor for the
first pair of a sequence).
"""

import logging
import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Any, Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from app.services.media_io import NormalizedFrame
from app.services.quantization import QpPair, QuantTable, TableSide, lookup_pair_gains

logger = logging.getLogger(__name__)

SCALE_FLOOR = 0.11
P_FLOOR = 2.0**-30


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ReferenceOrigin(StrEnum):
    BLANK_ADAPTOR = "blank_adaptor"
    DECODED = "decoded"
    REFRESH = "refresh"
    TRAINING_GT = "training_gt"
    TRAINING_NOISY = "training_noisy"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    latent_channels: int = Field(default=64, gt=0)
    feature_channels: int = Field(default=48, gt=0)
    hidden_channels: int = Field(default=64, gt=0)
    downsample_factor: Literal[8] = 8
    scale_floor: float = Field(default=SCALE_FLOOR, gt=0)
    p_floor: float = Field(default=P_FLOOR, gt=0, lt=1)

    @field_validator("latent_channels")
    @classmethod
    def _even_latent(cls, value: int) -> int:
        if value % 2:
            raise ValueError("latent_channels must be even: half belongs to each frame of a pair")
        return value


@dataclass(frozen=True)
class FeatureState:
    fused: torch.Tensor
    origin: ReferenceOrigin


@dataclass(frozen=True)
class ContextPair:
    enc_context: torch.Tensor
    dec_context: torch.Tensor


@dataclass(frozen=True)
class LatentCode:
    values: torch.Tensor
    prior_mean: torch.Tensor
    prior_scale: torch.Tensor


@dataclass(frozen=True)
class RateEstimate:
    bits: torch.Tensor

    @property
    def total_bits(self) -> float:
        return float(self.bits.detach())

    @property
    def per_frame_bits(self) -> tuple[float, float]:
        half = self.total_bits / 2
        return half, half


class _RoundStraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx: Any, values: torch.Tensor) -> torch.Tensor:
        return torch.sign(values) * torch.floor(torch.abs(values) + 0.5)

    @staticmethod
    def backward(ctx: Any, grad_output: torch.Tensor) -> torch.Tensor:
        return grad_output


def quantize_ste(values: torch.Tensor) -> torch.Tensor:
    """Round half away from zero; the gradient passes through unchanged."""
    out: torch.Tensor = _RoundStraightThrough.apply(values)
    return out


def _standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def estimate_rate(latent: LatentCode, p_floor: float = P_FLOOR) -> RateEstimate:
    mean, scale = latent.prior_mean, latent.prior_scale
    if not (torch.isfinite(mean).all() and torch.isfinite(scale).all()):
        raise NumericError("Entropy prior contains non-finite values")
    if (scale <= 0).any():
        raise NumericError("Entropy prior scale must be positive")
    # symmetric form keeps the tail probabilities precise
    distance = torch.abs(latent.values - mean)
    upper = _standard_normal_cdf((0.5 - distance) / scale)
    lower = _standard_normal_cdf((-0.5 - distance) / scale)
    probability = torch.clamp(upper - lower, min=p_floor)
    return RateEstimate(bits=-torch.log2(probability).sum())


def _conv(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.block = nn.Sequential(
            _conv(channels, channels),
            nn.LeakyReLU(0.1),
            _conv(channels, channels),
        )
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out: torch.Tensor = self.act(x + self.block(x))
        return out


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.body = nn.Sequential(_conv(in_ch, out_ch, stride=2), nn.LeakyReLU(0.1), ResidualBlock(out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out: torch.Tensor = self.body(x)
        return out


class UpBlock(nn.Module):
    """Sub-pixel 2x upsampling followed by a residual block."""

    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            _conv(in_ch, out_ch * 4),
            nn.PixelShuffle(2),
            nn.LeakyReLU(0.1),
            ResidualBlock(out_ch),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out: torch.Tensor = self.body(x)
        return out


class YuvStem(nn.Module):
    """Luma through a stride-2 conv, chroma joined at half resolution."""

    def __init__(self, y_channels: int, uv_channels: int, hidden: int) -> None:
        super().__init__()
        self.luma = _conv(y_channels, hidden, stride=2)
        self.merge = nn.Sequential(
            _conv(hidden + uv_channels, hidden),
            nn.LeakyReLU(0.1),
            ResidualBlock(hidden),
        )

    def forward(self, y: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
        out: torch.Tensor = self.merge(torch.cat([F.leaky_relu(self.luma(y), 0.1), uv], dim=1))
        return out


class Adaptor(nn.Module):
    def __init__(self, hidden: int, feature_channels: int) -> None:
        super().__init__()
        self.stem = YuvStem(1, 2, hidden)
        self.down = nn.Sequential(DownBlock(hidden, hidden), DownBlock(hidden, hidden))
        self.out = _conv(hidden, feature_channels)

    def forward(self, frame: NormalizedFrame) -> torch.Tensor:
        out: torch.Tensor = self.out(self.down(self.stem(frame.y, frame.uv)))
        return out


class FeatureExtractor(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.body = nn.Sequential(_conv(channels, channels), nn.LeakyReLU(0.1), _conv(channels, channels))

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        out: torch.Tensor = self.body(fused)
        return out


class ConditionedDown(nn.Module):
    """Last encoder stage: downsample, then fuse with the encoder context."""

    def __init__(self, hidden: int, feature_channels: int, latent_channels: int) -> None:
        super().__init__()
        self.down = DownBlock(hidden, hidden)
        self.fuse = nn.Sequential(
            _conv(hidden + feature_channels, hidden),
            nn.LeakyReLU(0.1),
            ResidualBlock(hidden),
            _conv(hidden, latent_channels),
        )

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        out: torch.Tensor = self.fuse(torch.cat([self.down(x), context], dim=1))
        return out


class ConditionedUp(nn.Module):
    """First decoder stage: fuse latent with context, keep the fused feature, upsample."""

    def __init__(self, hidden: int, feature_channels: int, latent_channels: int) -> None:
        super().__init__()
        self.fuse = nn.Sequential(
            _conv(latent_channels + feature_channels, hidden),
            nn.LeakyReLU(0.1),
            ResidualBlock(hidden),
            _conv(hidden, feature_channels),
        )
        self.up = UpBlock(feature_channels, hidden)

    def forward(self, latent: torch.Tensor, context: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fused: torch.Tensor = self.fuse(torch.cat([latent, context], dim=1))
        return fused, self.up(fused)


class ReconstructionGenerator(nn.Module):
    """Half-resolution features to a full-size Y plane and half-size U/V planes."""

    def __init__(self, hidden: int) -> None:
        super().__init__()
        self.body = ResidualBlock(hidden)
        self.luma = nn.Sequential(_conv(hidden, 4), nn.PixelShuffle(2))
        self.chroma = _conv(hidden, 2)

    def forward(self, features: torch.Tensor) -> NormalizedFrame:
        x = self.body(features)
        y = torch.clamp(0.5 + self.luma(x), 0.0, 1.0)
        uv = torch.clamp(0.5 + self.chroma(x), 0.0, 1.0)
        return NormalizedFrame(y=y, u=uv[:, :1], v=uv[:, 1:])


class PriorHead(nn.Module):
    """Gaussian mean/scale for the whole latent from the encoder context, in one pass."""

    def __init__(self, hidden: int, feature_channels: int, latent_channels: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            _conv(feature_channels, hidden),
            nn.LeakyReLU(0.1),
            _conv(hidden, hidden),
            nn.LeakyReLU(0.1),
            _conv(hidden, 2 * latent_channels),
        )

    def forward(self, context: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, scale = self.body(context).chunk(2, dim=1)
        return mean, F.softplus(scale)


class CodecModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None) -> None:
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        half = cfg.latent_channels // 2
        self.adaptor = Adaptor(cfg.hidden_channels, cfg.feature_channels)
        self.fe_enc = FeatureExtractor(cfg.feature_channels)
        self.fe_dec = FeatureExtractor(cfg.feature_channels)
        self.e1 = YuvStem(2, 4, cfg.hidden_channels)
        self.e2 = DownBlock(cfg.hidden_channels, cfg.hidden_channels)
        self.e3 = ConditionedDown(cfg.hidden_channels, cfg.feature_channels, cfg.latent_channels)
        self.d1 = ConditionedUp(cfg.hidden_channels, cfg.feature_channels, cfg.latent_channels)
        self.d2 = UpBlock(cfg.hidden_channels, cfg.hidden_channels)
        self.r1 = ReconstructionGenerator(cfg.hidden_channels)
        self.r2 = ReconstructionGenerator(cfg.hidden_channels)
        self.prior_head = PriorHead(cfg.hidden_channels, cfg.feature_channels, cfg.latent_channels)
        self.table_first = QuantTable(half, TableSide.FIRST_OF_PAIR)
        self.table_second = QuantTable(half, TableSide.SECOND_OF_PAIR)
        # log-gain vector -> per-channel scale of the decoder context; starts neutral
        self.context_gain = nn.Linear(cfg.latent_channels, cfg.feature_channels)
        nn.init.zeros_(self.context_gain.weight)
        nn.init.zeros_(self.context_gain.bias)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def _check_dims(self, height: int, width: int) -> None:
        factor = self.config.downsample_factor
        if height % factor or width % factor or height <= 0 or width <= 0:
            raise ShapeError(f"Frame size {width}x{height} must be a positive multiple of {factor}")

    def _pair_gains(self, qp_pair: QpPair) -> torch.Tensor:
        return lookup_pair_gains(self.table_first, self.table_second, qp_pair).view(1, -1, 1, 1)

    def init_reference_blank(self, height: int, width: int, batch: int = 1) -> FeatureState:
        self._check_dims(height, width)
        device = self.device
        blank = NormalizedFrame(
            y=torch.zeros(batch, 1, height, width, device=device),
            u=torch.zeros(batch, 1, height // 2, width // 2, device=device),
            v=torch.zeros(batch, 1, height // 2, width // 2, device=device),
        )
        return FeatureState(fused=self.adaptor(blank), origin=ReferenceOrigin.BLANK_ADAPTOR)

    def make_reference_from_frame(self, frame: NormalizedFrame, origin: ReferenceOrigin) -> FeatureState:
        self._check_dims(frame.height, frame.width)
        return FeatureState(fused=self.adaptor(frame.to(self.device)), origin=origin)

    def extract_contexts(self, state: FeatureState) -> ContextPair:
        return ContextPair(enc_context=self.fe_enc(state.fused), dec_context=self.fe_dec(state.fused))

    def prior(self, ctx: ContextPair, qp_pair: QpPair) -> tuple[torch.Tensor, torch.Tensor]:
        """Prior in the gained (quantized) domain; depends on the context only."""
        gains = self._pair_gains(qp_pair)
        mean, scale = self.prior_head(ctx.enc_context)
        return mean * gains, torch.clamp(scale * gains, min=self.config.scale_floor)

    def encode_pair(
        self,
        x_t: NormalizedFrame,
        x_t1: NormalizedFrame,
        ctx: ContextPair,
        qp_pair: QpPair,
    ) -> LatentCode:
        if (x_t.height, x_t.width) != (x_t1.height, x_t1.width):
            raise ShapeError(
                f"Pair frames differ in size: {x_t.width}x{x_t.height} vs {x_t1.width}x{x_t1.height}"
            )
        self._check_dims(x_t.height, x_t.width)
        y = torch.cat([x_t.y, x_t1.y], dim=1)
        uv = torch.cat([x_t.uv, x_t1.uv], dim=1)
        features = self.e3(self.e2(self.e1(y, uv)), ctx.enc_context)
        values = quantize_ste(features * self._pair_gains(qp_pair))
        mean, scale = self.prior(ctx, qp_pair)
        return LatentCode(values=values, prior_mean=mean, prior_scale=scale)

    def decode_pair(
        self,
        latent: LatentCode,
        ctx: ContextPair,
        qp_pair: QpPair,
    ) -> tuple[NormalizedFrame, NormalizedFrame, FeatureState]:
        values = latent.values
        if values.shape[1] != self.config.latent_channels or values.shape[-2:] != ctx.dec_context.shape[-2:]:
            raise ShapeError(
                f"Latent {tuple(values.shape)} does not match context {tuple(ctx.dec_context.shape)}"
            )
        gains = self._pair_gains(qp_pair)
        modulation = torch.exp(self.context_gain(torch.log(gains.flatten())))
        context = ctx.dec_context * modulation.view(1, -1, 1, 1)
        fused, up = self.d1(values / gains, context)
        features = self.d2(up)
        state = FeatureState(fused=fused, origin=ReferenceOrigin.DECODED)
        return self.r1(features), self.r2(features), state


def count_parameters(model: CodecModel) -> int:
    return sum(p.numel() for p in model.parameters())
