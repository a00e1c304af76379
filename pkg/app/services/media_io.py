"""Raw 8-bit I420 sequences: file I/O, normalization and training crops."""

import logging
import math
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt
import torch
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import read_config_file

logger = logging.getLogger(__name__)

Plane = npt.NDArray[np.uint8]


class MediaError(Exception):
    pass


class YuvFormatError(MediaError, ValueError):
    pass


class SequenceTooShortError(MediaError, ValueError):
    pass


def frame_bytes(width: int, height: int) -> int:
    return width * height * 3 // 2


@dataclass(frozen=True)
class Frame:
    y_plane: Plane
    u_plane: Plane
    v_plane: Plane

    def __post_init__(self) -> None:
        height, width = self.y_plane.shape
        if width < 2 or height < 2 or width % 2 or height % 2:
            raise YuvFormatError(f"Frame dimensions must be even and >= 2, got {width}x{height}")
        chroma = (height // 2, width // 2)
        if self.u_plane.shape != chroma or self.v_plane.shape != chroma:
            raise YuvFormatError(
                f"Chroma planes must be {chroma}, got {self.u_plane.shape} / {self.v_plane.shape}"
            )
        for plane in (self.y_plane, self.u_plane, self.v_plane):
            if plane.dtype != np.uint8:
                raise YuvFormatError(f"Planes must be uint8, got {plane.dtype}")

    @property
    def width(self) -> int:
        return int(self.y_plane.shape[1])

    @property
    def height(self) -> int:
        return int(self.y_plane.shape[0])

    @property
    def planes(self) -> tuple[Plane, Plane, Plane]:
        return self.y_plane, self.u_plane, self.v_plane

    def to_bytes(self) -> bytes:
        return self.y_plane.tobytes() + self.u_plane.tobytes() + self.v_plane.tobytes()

    def crop(self, top: int, left: int, size: int) -> "Frame":
        if top % 2 or left % 2 or size % 2:
            raise YuvFormatError("Crop offsets and size must be even to keep chroma aligned")
        c_top, c_left, c_size = top // 2, left // 2, size // 2
        return Frame(
            y_plane=self.y_plane[top : top + size, left : left + size].copy(),
            u_plane=self.u_plane[c_top : c_top + c_size, c_left : c_left + c_size].copy(),
            v_plane=self.v_plane[c_top : c_top + c_size, c_left : c_left + c_size].copy(),
        )

    def equals(self, other: "Frame") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.planes, other.planes, strict=True))


@dataclass
class Sequence:
    frames: list[Frame]
    name: str = "sequence"
    frame_rate: float = 30.0

    def __post_init__(self) -> None:
        if not self.frames:
            raise MediaError(f"Sequence '{self.name}' has no frames")
        dims = {(f.width, f.height) for f in self.frames}
        if len(dims) > 1:
            raise YuvFormatError(f"Sequence '{self.name}' mixes frame sizes: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


@dataclass(frozen=True)
class NormalizedFrame:
    """Planes as float tensors: y (B,1,H,W), u and v (B,1,H/2,W/2), values in [0, 1]."""

    y: torch.Tensor
    u: torch.Tensor
    v: torch.Tensor

    @property
    def height(self) -> int:
        return int(self.y.shape[-2])

    @property
    def width(self) -> int:
        return int(self.y.shape[-1])

    @property
    def uv(self) -> torch.Tensor:
        return torch.cat([self.u, self.v], dim=1)

    def to(self, device: torch.device | str) -> "NormalizedFrame":
        return NormalizedFrame(self.y.to(device), self.u.to(device), self.v.to(device))


class SequenceMeta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    path: Path
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    frame_rate: float = 30.0
    max_frames: int | None = None


def read_yuv420(
    path: Path | str,
    width: int,
    height: int,
    max_frames: int | None = None,
    name: str | None = None,
    frame_rate: float = 30.0,
) -> Sequence:
    path = Path(path)
    size = path.stat().st_size
    per_frame = frame_bytes(width, height)
    if size % per_frame:
        raise YuvFormatError(
            f"{path} holds {size} bytes, not a multiple of the {per_frame}-byte "
            f"I420 frame size for {width}x{height}"
        )
    available = size // per_frame
    count = available if max_frames is None else min(max_frames, available)
    with path.open("rb") as fh:
        frames = [_frame_from_buffer(fh.read(per_frame), width, height) for _ in range(count)]
    logger.debug("sequence read", extra={"path": str(path), "frames": count, "available": available})
    return Sequence(frames=frames, name=name or path.stem, frame_rate=frame_rate)


def _frame_from_buffer(buffer: bytes, width: int, height: int) -> Frame:
    raw = np.frombuffer(buffer, dtype=np.uint8)
    y_size, c_size = width * height, (width // 2) * (height // 2)
    return Frame(
        y_plane=raw[:y_size].reshape(height, width).copy(),
        u_plane=raw[y_size : y_size + c_size].reshape(height // 2, width // 2).copy(),
        v_plane=raw[y_size + c_size :].reshape(height // 2, width // 2).copy(),
    )


def yuv420_from_bytes(data: bytes, width: int, height: int, name: str = "upload") -> Sequence:
    per_frame = frame_bytes(width, height)
    if not data or len(data) % per_frame:
        raise YuvFormatError(
            f"Upload holds {len(data)} bytes, not a positive multiple of the {per_frame}-byte "
            f"I420 frame size for {width}x{height}"
        )
    frames = [
        _frame_from_buffer(data[start : start + per_frame], width, height)
        for start in range(0, len(data), per_frame)
    ]
    return Sequence(frames=frames, name=name)


def write_yuv420(sequence: Sequence | SequenceABC[Frame], path: Path | str) -> None:
    frames = sequence.frames if isinstance(sequence, Sequence) else list(sequence)
    if not frames:
        raise MediaError("Cannot write an empty sequence")
    with Path(path).open("wb") as fh:
        for frame in frames:
            fh.write(frame.to_bytes())


def load_sequence_meta(path: Path | str) -> SequenceMeta:
    path = Path(path)
    meta = SequenceMeta.model_validate(read_config_file(path))
    if not meta.path.is_absolute():
        meta = meta.model_copy(update={"path": path.parent / meta.path})
    return meta


def read_sequence(meta: SequenceMeta) -> Sequence:
    return read_yuv420(
        meta.path,
        meta.width,
        meta.height,
        max_frames=meta.max_frames,
        name=meta.name,
        frame_rate=meta.frame_rate,
    )


def _to_tensor(plane: Plane) -> torch.Tensor:
    return torch.from_numpy(plane.astype(np.float32) / 255.0)[None, None]


def normalize(frame: Frame) -> NormalizedFrame:
    return NormalizedFrame(
        y=_to_tensor(frame.y_plane),
        u=_to_tensor(frame.u_plane),
        v=_to_tensor(frame.v_plane),
    )


def _to_plane(values: torch.Tensor) -> Plane:
    scaled = values.detach().to("cpu", torch.float64).clamp(0.0, 1.0) * 255.0
    # round half up, not torch's half-to-even
    return torch.floor(scaled + 0.5).to(torch.uint8).numpy()


def denormalize(nf: NormalizedFrame, index: int = 0) -> Frame:
    return Frame(
        y_plane=_to_plane(nf.y[index, 0]),
        u_plane=_to_plane(nf.u[index, 0]),
        v_plane=_to_plane(nf.v[index, 0]),
    )


def stack_frames(frames: SequenceABC[NormalizedFrame]) -> NormalizedFrame:
    return NormalizedFrame(
        y=torch.cat([f.y for f in frames]),
        u=torch.cat([f.u for f in frames]),
        v=torch.cat([f.v for f in frames]),
    )


@dataclass
class FrameGroup:
    frames: list[Frame]
    previous: Frame | None
    start: int
    offset: tuple[int, int]
    source: str = field(default="")

    @property
    def identifier(self) -> str:
        return f"{self.source}@{self.start}+{self.offset[0]},{self.offset[1]}"


def extract_training_pairs(
    sequence: Sequence,
    patch_size: int,
    group_len: int,
    rng: np.random.Generator,
) -> list[FrameGroup]:
    """Co-located random crops of every run of ``group_len`` consecutive frames."""
    if len(sequence) < group_len:
        raise SequenceTooShortError(
            f"Sequence '{sequence.name}' needs {group_len} frames, has {len(sequence)}"
        )
    if patch_size % 2 or patch_size > min(sequence.width, sequence.height):
        raise YuvFormatError(
            f"Patch size {patch_size} must be even and fit {sequence.width}x{sequence.height}"
        )
    groups: list[FrameGroup] = []
    for start in range(len(sequence) - group_len + 1):
        top = 2 * int(rng.integers(0, (sequence.height - patch_size) // 2 + 1))
        left = 2 * int(rng.integers(0, (sequence.width - patch_size) // 2 + 1))
        frames = [f.crop(top, left, patch_size) for f in sequence.frames[start : start + group_len]]
        previous = sequence.frames[start - 1].crop(top, left, patch_size) if start > 0 else None
        groups.append(
            FrameGroup(
                frames=frames,
                previous=previous,
                start=start,
                offset=(top, left),
                source=sequence.name,
            )
        )
    return groups


def synthetic_clip(
    width: int,
    height: int,
    frames: int,
    kind: Literal["moving_gradient", "scene_cut"] = "moving_gradient",
    cut_at: int | None = None,
    name: str | None = None,
) -> Sequence:
    """Deterministic test content.

    ``moving_gradient`` is a diagonal luma ramp with a sinusoidal texture that
    shifts two pixels per frame; ``scene_cut`` switches to a different pattern
    (vertical bars on a dark field) at ``cut_at`` (default: half way).
    """
    cut = frames // 2 if cut_at is None else cut_at
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = np.mgrid[0 : height // 2, 0 : width // 2].astype(np.float64)
    out: list[Frame] = []
    for t in range(frames):
        if kind == "scene_cut" and t >= cut:
            shift = 2 * (t - cut)
            y = 40 + 60 * (np.sin(2 * math.pi * (xx + shift) / 12) > 0) + 0.4 * yy
            u = 96 + 20 * np.cos(2 * math.pi * (cx + shift / 2) / 9)
            v = 150 + 0 * cx
        else:
            shift = 2 * t
            y = 16 + 160 * ((xx + yy + shift) % (width + height)) / (width + height)
            y += 24 * np.sin(2 * math.pi * (xx + shift) / 16) * np.cos(2 * math.pi * yy / 20)
            u = 128 + 40 * np.sin(2 * math.pi * (cx + shift / 2) / 24)
            v = 128 + 40 * np.cos(2 * math.pi * (cy + cx) / 30)
        out.append(
            Frame(
                y_plane=np.clip(np.rint(y), 0, 255).astype(np.uint8),
                u_plane=np.clip(np.rint(u), 0, 255).astype(np.uint8),
                v_plane=np.clip(np.rint(v), 0, 255).astype(np.uint8),
            )
        )
    return Sequence(frames=out, name=name or f"{kind}_{width}x{height}")
