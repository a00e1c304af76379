"""QP schedule and the per-position quantization tables of a coded pair."""

import math
from enum import StrEnum
from typing import NamedTuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

QP_LEVELS = 64
MAX_QP = QP_LEVELS - 1
DEFAULT_QP_BIAS = (0, 8, 0, 4, 0, 4, 0, 4)

# per-step log-gain growth of a fresh table; spans roughly 1x..44x over 64 QPs
_INIT_LOG_GAIN_STEP = 0.06


class QuantizationConfigError(ValueError):
    pass


class TableSide(StrEnum):
    FIRST_OF_PAIR = "first_of_pair"
    SECOND_OF_PAIR = "second_of_pair"


class QpPair(NamedTuple):
    qp_first: int
    qp_second: int


class QpSchedule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    base_qp: int = Field(ge=0, le=MAX_QP)
    bias: tuple[int, ...] = DEFAULT_QP_BIAS

    @field_validator("bias")
    @classmethod
    def _check_bias(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if len(value) != 8 or any(b < 0 for b in value):
            raise ValueError(f"QP bias must be 8 non-negative integers, got {list(value)}")
        return value


def clamp_qp(qp: int) -> int:
    return max(0, min(MAX_QP, qp))


def schedule_qp(schedule: QpSchedule, frame_index: int) -> int:
    if frame_index < 0:
        raise QuantizationConfigError(f"frame_index must be >= 0, got {frame_index}")
    return clamp_qp(schedule.base_qp + schedule.bias[frame_index % len(schedule.bias)])


def qp_pair_for(schedule: QpSchedule, pair_index: int) -> QpPair:
    return QpPair(
        schedule_qp(schedule, 2 * pair_index),
        schedule_qp(schedule, 2 * pair_index + 1),
    )


def packet_qp_pair(schedule: QpSchedule, packet_index: int, frames_per_packet: int = 2) -> QpPair:
    """QPs of one coded packet; a single-frame packet uses its frame's QP on both table sides."""
    if frames_per_packet == 1:
        qp = schedule_qp(schedule, packet_index)
        return QpPair(qp, qp)
    if frames_per_packet != 2:
        raise QuantizationConfigError(f"frames_per_packet must be 1 or 2, got {frames_per_packet}")
    return qp_pair_for(schedule, packet_index)


def lambda_for_qp(qp: int, lambda_min: float, lambda_max: float) -> float:
    """Geometric rate-distortion trade-off ladder over the QP range."""
    return lambda_min * (lambda_max / lambda_min) ** (clamp_qp(qp) / MAX_QP)


class QuantTable(nn.Module):
    """Per-QP channel gains, monotone non-decreasing in QP by construction.

    gains[q] = exp(log_g_min) * exp(sum_{k=1..q} softplus(raw[k]))
    """

    def __init__(self, channels: int, side: TableSide, levels: int = QP_LEVELS) -> None:
        super().__init__()
        self.side = side
        self.channels = channels
        self.log_g_min = nn.Parameter(torch.zeros(channels))
        init = math.log(math.expm1(_INIT_LOG_GAIN_STEP))
        self.raw = nn.Parameter(torch.full((levels, channels), init))

    def gains(self) -> torch.Tensor:
        steps = F.softplus(self.raw[1:])
        log_gain = torch.cat(
            [torch.zeros_like(self.raw[:1]), torch.cumsum(steps, dim=0)], dim=0
        )
        return torch.exp(self.log_g_min + log_gain)

    def forward(self, qp: int) -> torch.Tensor:
        if not 0 <= qp < self.raw.shape[0]:
            raise QuantizationConfigError(f"QP {qp} outside [0, {self.raw.shape[0] - 1}]")
        return self.gains()[qp]


def lookup_pair_gains(
    table_first: QuantTable,
    table_second: QuantTable,
    qp_pair: QpPair,
) -> torch.Tensor:
    if table_first.channels != table_second.channels:
        raise QuantizationConfigError(
            f"Quantization tables disagree on channels: "
            f"{table_first.channels} vs {table_second.channels}"
        )
    return torch.cat([table_first(qp_pair.qp_first), table_second(qp_pair.qp_second)])
