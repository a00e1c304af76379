"""Length-prefixed container for coded pairs.

Layout (little endian)::

    header  "UVCP" u16 version, u16 width, u16 height, u32 frames,
            i32 intra_period, u32 refresh_period, u8 mode,
            u8 frames_per_packet, u8 separate_intra
    packet  u32 payload length, then
            u32 pair_index, u8 qp_first, u8 qp_second, u8 frame_count,
            u16 channels, u16 rows, u16 cols, 16-byte prior digest,
            int32 latent values (channels * rows * cols)
"""

import struct
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from app.services.pipeline import CodingConfig, CodingMode, PairPacket, PacketRecord
from app.services.quantization import QpPair

MAGIC = b"UVCP"
CONTAINER_VERSION = 2

_HEADER = struct.Struct("<4sHHHIiIBBB")
_LENGTH = struct.Struct("<I")
_PACKET = struct.Struct("<IBBBHHH16s")
HEADER_SIZE = _HEADER.size
_MODES = list(CodingMode)


class PacketFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ContainerHeader:
    width: int
    height: int
    frames: int
    intra_period: int
    refresh_period: int
    mode: CodingMode
    frames_per_packet: Literal[1, 2] = 2
    separate_intra: bool = False

    def coding_config(self, base_qp: int = 32) -> CodingConfig:
        return CodingConfig(
            base_qp=base_qp,
            intra_period=self.intra_period,
            refresh_period=self.refresh_period,
            mode=self.mode,
            frames_per_packet=self.frames_per_packet,
            separate_intra=self.separate_intra,
        )


def write_container(
    path: Path,
    packets: Iterable[PairPacket | PacketRecord],
    width: int,
    height: int,
    config: CodingConfig,
) -> Path:
    records = [p.to_record() if isinstance(p, PairPacket) else p for p in packets]
    frames = sum(r.frame_count for r in records)
    with path.open("wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                CONTAINER_VERSION,
                width,
                height,
                frames,
                config.intra_period,
                config.refresh_period,
                _MODES.index(config.mode),
                config.frames_per_packet,
                int(config.separate_intra),
            )
        )
        for record in records:
            values = record.values
            if values.dim() == 4:
                if values.shape[0] != 1:
                    raise PacketFormatError("Only single-sequence latents can be stored")
                values = values[0]
            channels, rows, cols = values.shape
            body = np.ascontiguousarray(values.to(torch.int32).numpy(), dtype="<i4").tobytes()
            head = _PACKET.pack(
                record.pair_index,
                record.qp_pair.qp_first,
                record.qp_pair.qp_second,
                record.frame_count,
                channels,
                rows,
                cols,
                record.prior_digest,
            )
            fh.write(_LENGTH.pack(len(head) + len(body)))
            fh.write(head)
            fh.write(body)
    return path


def read_container(path: Path) -> tuple[ContainerHeader, list[PacketRecord]]:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise PacketFormatError(f"{path} is too short for a container header")
    (magic, version, width, height, frames, intra, refresh, mode, per_packet, separate) = (
        _HEADER.unpack_from(data)
    )
    if magic != MAGIC:
        raise PacketFormatError(f"{path} is not a packet container")
    if version != CONTAINER_VERSION:
        raise PacketFormatError(f"Container version {version} unsupported, expected {CONTAINER_VERSION}")
    if mode >= len(_MODES):
        raise PacketFormatError(f"Unknown coding mode id {mode}")
    if per_packet not in (1, 2):
        raise PacketFormatError(f"Header declares {per_packet} frames per packet")
    header = ContainerHeader(
        width,
        height,
        frames,
        intra,
        refresh,
        _MODES[mode],
        frames_per_packet=1 if per_packet == 1 else 2,
        separate_intra=bool(separate),
    )

    records: list[PacketRecord] = []
    offset = _HEADER.size
    while offset < len(data):
        if offset + _LENGTH.size > len(data):
            raise PacketFormatError(f"Truncated length prefix at byte {offset}")
        (length,) = _LENGTH.unpack_from(data, offset)
        offset += _LENGTH.size
        end = offset + length
        if end > len(data) or length < _PACKET.size:
            raise PacketFormatError(f"Truncated packet at byte {offset}")
        index, qp_first, qp_second, count, channels, rows, cols, digest = _PACKET.unpack_from(data, offset)
        expected = _PACKET.size + 4 * channels * rows * cols
        if length != expected:
            raise PacketFormatError(f"Packet {index} declares {length} bytes, expected {expected}")
        if count not in (1, 2):
            raise PacketFormatError(f"Packet {index} has frame count {count}")
        values = np.frombuffer(data, dtype="<i4", count=channels * rows * cols, offset=offset + _PACKET.size)
        records.append(
            PacketRecord(
                pair_index=index,
                qp_pair=QpPair(qp_first, qp_second),
                frame_count=1 if count == 1 else 2,
                values=torch.from_numpy(values.astype(np.float32).reshape(1, channels, rows, cols)),
                prior_digest=digest,
            )
        )
        offset = end
    coded = sum(r.frame_count for r in records)
    if coded != header.frames:
        raise PacketFormatError(f"Header declares {header.frames} frames but the packets hold {coded}")
    return header, records
