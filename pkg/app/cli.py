"""Command-line entry point: ``uvc {train,encode,decode,eval,plot}``.

Every command reads an optional TOML file (``--config``) and lets flags
override it. Exit codes: 0 success, 2 usage or configuration error,
1 runtime failure.
"""

import argparse
import logging
import random
import sys
from collections.abc import Callable
from collections.abc import Sequence as SequenceABC
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Self

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import get_settings, merge_run_config, read_config_file
from app.core.logging import configure_logging
from app.services.checkpoint import load_checkpoint
from app.services.codec_model import CodecModel, ModelConfig
from app.services.evaluation import (
    RDCurve,
    bd_rate_matrix,
    build_rd_curve,
    per_frame_trace,
    read_curve_csv,
    read_trace_csv,
    write_bd_matrix_csv,
    write_curve_csv,
    write_trace_csv,
)
from app.services.media_io import Sequence, load_sequence_meta, read_sequence, read_yuv420, write_yuv420
from app.services.packets import read_container, write_container
from app.services.pipeline import CodingConfig, CodingMode, decode_sequence, encode_sequence
from app.services.plotting import plot_rd_curves, plot_trace
from app.services.training import TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_DEFAULT_QPS = (8, 20, 32, 44, 56, 63)


class TrainRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: Path
    out: Path = Path("runs/train")
    resume: Path | None = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)


class EncodeRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    inputs: list[Path] = Field(min_length=1)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    checkpoint: Path
    intra_checkpoint: Path | None = None
    out: Path = Path("runs/encode")
    max_frames: int | None = Field(default=None, gt=0)
    workers: int = Field(default=1, gt=0)
    seed: int = 0
    coding: CodingConfig = Field(default_factory=CodingConfig)

    @model_validator(mode="after")
    def _intra_checkpoint_selects_separate_intra(self) -> Self:
        if self.intra_checkpoint is not None and not self.coding.separate_intra:
            self.coding = _with_separate_intra(self.coding, True)
        return self


class DecodeRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input: Path
    checkpoint: Path
    intra_checkpoint: Path | None = None
    out: Path
    seed: int = 0


class EvalRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    methods: dict[str, Path] = Field(default_factory=dict)
    intra_checkpoints: dict[str, Path] = Field(default_factory=dict)
    curves: list[Path] = Field(default_factory=list)
    datasets: dict[str, Path] = Field(default_factory=dict)
    anchor: str
    qps: list[int] = Field(default_factory=lambda: list(_DEFAULT_QPS))
    out: Path = Path("runs/eval")
    workers: int = Field(default=1, gt=0)
    seed: int = 0
    coding: CodingConfig = Field(default_factory=CodingConfig)


class PlotRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    traces: list[Path] = Field(default_factory=list)
    curves: list[Path] = Field(default_factory=list)
    out: Path = Path("runs/plots")


def _with_separate_intra(coding: CodingConfig, enabled: bool) -> CodingConfig:
    # revalidated so a unified configuration refuses the intra model
    return CodingConfig.model_validate({**coding.model_dump(), "separate_intra": enabled})


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _default(model: type[BaseModel], name: str) -> Any:
    return model.model_fields[name].get_default(call_default_factory=True)


def _qp_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'") from exc


def _named_path(text: str) -> tuple[str, Path]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got '{text}'")
    return name, Path(path)


def _coding_flags(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "base_qp": getattr(args, "qp", None),
        "intra_period": args.intra_period,
        "refresh_period": args.refresh_period,
        "mode": args.mode,
        "frames_per_packet": args.frames_per_packet,
    }


def _file_values(args: argparse.Namespace) -> dict[str, Any]:
    if args.config is None:
        return {}
    values = read_config_file(args.config)
    # a shared file may hold one table per command
    section = values.get(args.command)
    return section if isinstance(section, dict) else values


def _with_settings_workers(values: dict[str, Any]) -> dict[str, Any]:
    # settings sit below the file, flags above it
    return {"workers": get_settings().workers, **values}


def _load_dataset(path: Path) -> list[Sequence]:
    if not path.exists():
        raise FileNotFoundError(f"Dataset {path} does not exist")
    sidecars = sorted(path.glob("*.toml")) if path.is_dir() else [path]
    if not sidecars:
        raise FileNotFoundError(f"Dataset directory {path} holds no sequence descriptions (*.toml)")
    return [read_sequence(load_sequence_meta(p)) for p in sidecars]


def _load_model(path: Path) -> CodecModel:
    model, _ = load_checkpoint(path, device=get_settings().device)
    return model


def _load_intra_model(path: Path | None) -> CodecModel | None:
    return None if path is None else _load_model(path)


def cmd_train(args: argparse.Namespace) -> int:
    run = merge_run_config(
        TrainRun,
        _file_values(args),
        {
            "dataset": args.dataset,
            "out": args.out,
            "resume": args.resume,
            "training": {
                "seed": args.seed,
                "steps": args.steps,
                "fixed_base_qp": args.qp,
                "frames_per_packet": args.frames_per_packet,
                "intra_only": args.intra_only,
            },
        },
    )
    seed_everything(run.training.seed)
    sequences = _load_dataset(run.dataset)
    resume_state = None
    if run.resume is not None:
        model, resume_state = load_checkpoint(run.resume, device=get_settings().device)
    else:
        model = CodecModel(run.model).to(get_settings().device)
    result = train(model, sequences, run.training, run.out, resume=resume_state)
    final = result.checkpoints[-1] if result.checkpoints else None
    print(f"final_loss={result.final_loss:.6f}")
    print(f"checkpoint={final}")
    return EXIT_OK


def _encode_one(model: CodecModel, intra: CodecModel | None, run: EncodeRun, path: Path) -> list[Path]:
    sequence = read_yuv420(path, run.width, run.height, max_frames=run.max_frames)
    packets, report = encode_sequence(model, sequence, run.coding, intra_model=intra)
    stem = run.out / sequence.name
    return [
        write_container(stem.with_suffix(".uvc"), packets, sequence.width, sequence.height, run.coding),
        write_trace_csv(per_frame_trace(report), stem.with_name(f"{sequence.name}_trace.csv")),
        _write_rec(report.reconstructions, stem.with_name(f"{sequence.name}_rec.yuv")),
    ]


def _write_rec(sequence: Sequence, path: Path) -> Path:
    write_yuv420(sequence, path)
    return path


def cmd_encode(args: argparse.Namespace) -> int:
    run = merge_run_config(
        EncodeRun,
        _with_settings_workers(_file_values(args)),
        {
            "inputs": args.input or None,
            "width": args.width,
            "height": args.height,
            "checkpoint": args.checkpoint,
            "intra_checkpoint": args.intra_checkpoint,
            "out": args.out,
            "max_frames": args.max_frames,
            "workers": args.workers,
            "seed": args.seed,
            "coding": _coding_flags(args),
        },
    )
    for path in run.inputs:
        if not path.exists():
            raise FileNotFoundError(f"Input {path} does not exist")
    seed_everything(run.seed)
    model = _load_model(run.checkpoint)
    intra = _load_intra_model(run.intra_checkpoint)
    factor = model.config.downsample_factor
    if run.width % factor or run.height % factor:
        raise ValueError(f"Frame size {run.width}x{run.height} must be a multiple of {factor} in both dimensions")
    run.out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=run.workers) as pool:
        outputs = list(pool.map(lambda p: _encode_one(model, intra, run, p), run.inputs))
    for written in outputs:
        for path in written:
            print(path)
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    run = merge_run_config(
        DecodeRun,
        _file_values(args),
        {
            "input": args.input,
            "checkpoint": args.checkpoint,
            "intra_checkpoint": args.intra_checkpoint,
            "out": args.out,
            "seed": args.seed,
        },
    )
    if not run.input.exists():
        raise FileNotFoundError(f"Container {run.input} does not exist")
    seed_everything(run.seed)
    header, records = read_container(run.input)
    model = _load_model(run.checkpoint)
    intra = _load_intra_model(run.intra_checkpoint)
    if header.separate_intra and intra is None:
        raise ValueError(f"{run.input} was coded with a separate intra model; pass --intra-checkpoint")
    decoded = decode_sequence(
        model,
        records,
        (header.width, header.height),
        header.coding_config(),
        name=run.input.stem,
        intra_model=intra,
    )
    run.out.parent.mkdir(parents=True, exist_ok=True)
    write_yuv420(decoded, run.out)
    print(run.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = merge_run_config(
        EvalRun,
        _with_settings_workers(_file_values(args)),
        {
            "methods": dict(args.method) if args.method else None,
            "intra_checkpoints": dict(args.intra) if args.intra else None,
            "curves": args.curves or None,
            "datasets": dict(args.dataset) if args.dataset else None,
            "anchor": args.anchor,
            "qps": args.qps,
            "out": args.out,
            "workers": args.workers,
            "seed": args.seed,
            "coding": _coding_flags(args),
        },
    )
    unknown = sorted(set(run.intra_checkpoints) - set(run.methods))
    if unknown:
        raise ValueError(f"--intra names methods that were not given: {unknown}")
    seed_everything(run.seed)
    curves: list[RDCurve] = []
    for csv_path in run.curves:
        curves.extend(read_curve_csv(csv_path))
    if run.methods:
        if not run.datasets:
            raise ValueError("Evaluating checkpoints needs at least one --dataset NAME=DIR")
        datasets = {name: _load_dataset(path) for name, path in run.datasets.items()}
        for label, checkpoint in run.methods.items():
            model = _load_model(checkpoint)
            intra = _load_intra_model(run.intra_checkpoints.get(label))
            coding = _with_separate_intra(run.coding, intra is not None)
            for dataset, sequences in datasets.items():
                curves.append(
                    build_rd_curve(
                        model,
                        sequences,
                        run.qps,
                        coding,
                        label=label,
                        dataset=dataset,
                        workers=run.workers,
                        intra_model=intra,
                    )
                )
    if not curves:
        raise ValueError("Nothing to evaluate: pass --method or --curves")

    matrix = bd_rate_matrix(curves, run.anchor)
    run.out.mkdir(parents=True, exist_ok=True)
    print(write_curve_csv(curves, run.out / "rd_curves.csv"))
    print(write_bd_matrix_csv(matrix.values, run.out / "bd_rate.csv"))
    for failure in matrix.failures:
        print(f"bd-rate unavailable: {failure}", file=sys.stderr)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    run = merge_run_config(
        PlotRun,
        _file_values(args),
        {"traces": args.traces or None, "curves": args.curves or None, "out": args.out},
    )
    if not run.traces and not run.curves:
        raise ValueError("Nothing to plot: pass --traces or --curves")
    written: list[Path] = []
    for trace_path in run.traces:
        rows = read_trace_csv(trace_path)
        written.append(plot_trace(rows, "bpp", run.out / f"{trace_path.stem}_bpp.png"))
        written.append(plot_trace(rows, "psnr_yuv", run.out / f"{trace_path.stem}_psnr.png"))
    by_dataset: dict[str, list[RDCurve]] = {}
    for curve_path in run.curves:
        for curve in read_curve_csv(curve_path):
            by_dataset.setdefault(curve.dataset, []).append(curve)
    for dataset, curves in by_dataset.items():
        written.append(plot_rd_curves(curves, run.out / f"rd_{dataset}.png", title=dataset))
    for path in written:
        print(path)
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML file; flags override its values")
    parser.add_argument("--out", type=Path, help="output location")


def _add_coding(parser: argparse.ArgumentParser, with_qp: bool = True) -> None:
    if with_qp:
        parser.add_argument(
            "--qp", type=int, help=f"base QP in [0, 63] (default {_default(CodingConfig, 'base_qp')})"
        )
    parser.add_argument(
        "--intra-period",
        type=int,
        help=f"-1 or frames between blank-reference resets (default {_default(CodingConfig, 'intra_period')})",
    )
    parser.add_argument(
        "--refresh-period",
        type=int,
        help="frames between reference refreshes, divided_refresh only (default 0)",
    )
    parser.add_argument(
        "--mode",
        choices=[m.value for m in CodingMode],
        help=f"coding mode (default {_default(CodingConfig, 'mode').value})",
    )
    parser.add_argument(
        "--frames-per-packet",
        type=int,
        choices=[1, 2],
        help="1 codes every frame on arrival, 2 codes frames in pairs (default 2)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uvc", description="Unified two-frame neural video codec")
    parser.add_argument("--log-level", default=None, help="log level (default from settings, INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec on a dataset of YUV sequences")
    _add_common(p)
    p.add_argument("--dataset", type=Path, help="directory of sequence descriptions (*.toml)")
    p.add_argument("--seed", type=int, help=f"random seed (default {_default(TrainConfig, 'seed')})")
    p.add_argument("--steps", type=int, help=f"training steps (default {_default(TrainConfig, 'steps')})")
    p.add_argument("--qp", type=int, help="pin the base QP instead of sampling it (default sampled)")
    p.add_argument("--frames-per-packet", type=int, choices=[1, 2], help="frames coded per packet (default 2)")
    p.add_argument(
        "--intra-only",
        action="store_true",
        default=None,
        help="restart every packet from the blank reference, for a dedicated intra model",
    )
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("encode", help="code raw YUV420 files into packet containers")
    _add_common(p)
    _add_coding(p)
    p.add_argument("input", nargs="*", type=Path, help="raw 8-bit I420 files")
    p.add_argument("--width", type=int, help="frame width, a multiple of 8")
    p.add_argument("--height", type=int, help="frame height, a multiple of 8")
    p.add_argument("--checkpoint", type=Path, help="trained codec checkpoint")
    p.add_argument("--intra-checkpoint", type=Path, help="separate intra model, divided_refresh only")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--max-frames", type=int, help="code at most this many frames (default all)")
    p.add_argument("--workers", type=int, help=f"parallel sequences (default {_default(EncodeRun, 'workers')})")
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("decode", help="decode a packet container to raw YUV420")
    _add_common(p)
    p.add_argument("input", nargs="?", type=Path, help="packet container")
    p.add_argument("--checkpoint", type=Path, help="trained codec checkpoint")
    p.add_argument("--intra-checkpoint", type=Path, help="intra model the container was coded with")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("eval", help="RD curves and BD-rate matrix against an anchor")
    _add_common(p)
    _add_coding(p, with_qp=False)
    p.add_argument("--method", action="append", type=_named_path, help="NAME=CHECKPOINT, repeatable")
    p.add_argument(
        "--intra", action="append", type=_named_path, help="NAME=CHECKPOINT separate intra model for a method"
    )
    p.add_argument("--curves", action="append", type=Path, help="precomputed RD curve CSV, repeatable")
    p.add_argument("--dataset", action="append", type=_named_path, help="NAME=DIR of sequence descriptions")
    p.add_argument("--anchor", help="method every other method is compared against")
    p.add_argument(
        "--qps", type=_qp_list, help=f"comma separated base QPs (default {','.join(map(str, _DEFAULT_QPS))})"
    )
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--workers", type=int, help=f"parallel sequences (default {_default(EvalRun, 'workers')})")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("plot", help="render trace and RD curve CSVs to PNG")
    _add_common(p)
    p.add_argument("--traces", action="append", type=Path, help="per-frame trace CSV, repeatable")
    p.add_argument("--curves", action="append", type=Path, help="RD curve CSV, repeatable")
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv: SequenceABC[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    configure_logging(args.log_level or settings.log_level, fmt="text", stream=sys.stderr)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("command failed", extra={"command": args.command, "reason": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        logger.exception("command crashed", extra={"command": args.command})
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
