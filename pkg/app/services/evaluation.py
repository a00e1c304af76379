"""Rate-distortion curves, Bjøntegaard deltas and per-frame traces."""

import csv
import logging
import math
from collections.abc import Iterable, Mapping
from collections.abc import Sequence as SequenceABC
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import NamedTuple, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator

from app.services.codec_model import CodecModel
from app.services.media_io import Sequence
from app.services.metrics import PsnrResult, psnr_yuv420
from app.services.pipeline import CodingConfig, SequenceReport, encode_sequence

__all__ = [
    "CsvFormatError",
    "CurveError",
    "CurveOverlapError",
    "PsnrResult",
    "RDCurve",
    "RDPoint",
    "TraceRow",
    "aggregate_reports",
    "bd_psnr",
    "bd_rate",
    "bd_rate_matrix",
    "build_rd_curve",
    "per_frame_trace",
    "psnr_yuv420",
    "read_curve_csv",
    "read_trace_csv",
    "write_bd_matrix_csv",
    "write_curve_csv",
    "write_trace_csv",
]

logger = logging.getLogger(__name__)

MIN_CURVE_POINTS = 4
BD_SAMPLES = 1000

TRACE_FIELDS = ("frame_index", "bits", "bpp", "psnr_y", "psnr_u", "psnr_v", "psnr_yuv")
CURVE_FIELDS = ("label", "dataset", "bpp", "psnr")


class CurveError(ValueError):
    pass


class CurveOverlapError(CurveError):
    def __init__(self, anchor: "RDCurve", test: "RDCurve") -> None:
        self.anchor_range = anchor.psnr_range
        self.test_range = test.psnr_range
        super().__init__(
            f"PSNR ranges do not overlap: {anchor.label} "
            f"[{self.anchor_range[0]:.3f}, {self.anchor_range[1]:.3f}] dB vs {test.label} "
            f"[{self.test_range[0]:.3f}, {self.test_range[1]:.3f}] dB"
        )


class CsvFormatError(ValueError):
    def __init__(self, path: Path, row: int, reason: str) -> None:
        self.path = path
        self.row = row
        super().__init__(f"{path}: row {row}: {reason}")


class RDPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    bpp: float = Field(gt=0)
    psnr: float = Field(allow_inf_nan=False)


class RDCurve(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    dataset: str = "default"
    points: tuple[RDPoint, ...]

    @field_validator("points")
    @classmethod
    def _sorted_by_rate(cls, value: tuple[RDPoint, ...]) -> tuple[RDPoint, ...]:
        if len(value) < MIN_CURVE_POINTS:
            raise ValueError(f"An RD curve needs at least {MIN_CURVE_POINTS} points, got {len(value)}")
        ordered = tuple(sorted(value, key=lambda p: p.bpp))
        for lower, upper in zip(ordered, ordered[1:]):
            if upper.bpp <= lower.bpp:
                raise ValueError(f"RD curve bpp must be strictly increasing; {upper.bpp} repeats")
        return ordered

    @model_validator(mode="after")
    def _warn_non_monotone(self) -> Self:
        psnr = [p.psnr for p in self.points]
        if any(b < a for a, b in zip(psnr, psnr[1:])):
            logger.warning("RD curve PSNR decreases with rate", extra={"label": self.label, "dataset": self.dataset})
        return self

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points], dtype=np.float64)

    @property
    def psnr_range(self) -> tuple[float, float]:
        return float(self.psnr.min()), float(self.psnr.max())

    def scaled(self, factor: float, label: str | None = None) -> "RDCurve":
        """Same PSNRs at ``factor`` times the rate."""
        return RDCurve(
            label=label or self.label,
            dataset=self.dataset,
            points=tuple(RDPoint(bpp=p.bpp * factor, psnr=p.psnr) for p in self.points),
        )


def _pchip(x: np.ndarray, y: np.ndarray) -> PchipInterpolator:
    # points sharing an abscissa (a PSNR plateau) collapse to their mean ordinate
    xs, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ys = np.bincount(inverse, weights=y) / counts
    if len(xs) < 2:
        raise CurveError("Interpolation needs at least two distinct abscissae")
    return PchipInterpolator(xs, ys)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference in percent at equal quality; negative means test saves bits."""
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if hi - lo <= 0:
        raise CurveOverlapError(anchor, test)
    samples = np.linspace(lo, hi, BD_SAMPLES)
    log_anchor = _pchip(anchor.psnr, np.log(anchor.bpp))(samples)
    log_test = _pchip(test.psnr, np.log(test.bpp))(samples)
    mean_diff = (trapezoid(log_test, samples) - trapezoid(log_anchor, samples)) / (hi - lo)
    return float((math.exp(mean_diff) - 1.0) * 100.0)


def bd_psnr(anchor: RDCurve, test: RDCurve) -> float:
    """Average PSNR difference in dB over the shared log-rate interval."""
    log_anchor, log_test = np.log(anchor.bpp), np.log(test.bpp)
    lo = max(log_anchor.min(), log_test.min())
    hi = min(log_anchor.max(), log_test.max())
    if hi - lo <= 0:
        raise CurveError(
            f"Rate ranges do not overlap: {anchor.label} [{anchor.bpp.min():.5f}, {anchor.bpp.max():.5f}] bpp "
            f"vs {test.label} [{test.bpp.min():.5f}, {test.bpp.max():.5f}] bpp"
        )
    samples = np.linspace(lo, hi, BD_SAMPLES)
    q_anchor = _pchip(log_anchor, anchor.psnr)(samples)
    q_test = _pchip(log_test, test.psnr)(samples)
    return float((trapezoid(q_test, samples) - trapezoid(q_anchor, samples)) / (hi - lo))


def aggregate_reports(reports: SequenceABC[SequenceReport]) -> RDPoint:
    """Average each sequence first, then across sequences."""
    if not reports:
        raise CurveError("Cannot aggregate an empty set of sequence reports")
    bpp = math.fsum(r.total_bpp for r in reports) / len(reports)
    psnr = math.fsum(r.mean_psnr for r in reports) / len(reports)
    return RDPoint(bpp=bpp, psnr=psnr)


def build_rd_curve(
    model: CodecModel,
    sequences: SequenceABC[Sequence],
    qp_list: Iterable[int],
    config: CodingConfig,
    label: str = "codec",
    dataset: str = "default",
    workers: int = 1,
    intra_model: CodecModel | None = None,
) -> RDCurve:
    if not sequences:
        raise CurveError("build_rd_curve needs at least one sequence")
    qps = list(qp_list)
    if len(qps) < MIN_CURVE_POINTS:
        raise CurveError(f"build_rd_curve needs at least {MIN_CURVE_POINTS} QPs, got {len(qps)}")

    points: list[RDPoint] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for qp in qps:
            qp_config = config.model_copy(update={"base_qp": qp})
            reports = list(
                pool.map(lambda seq: encode_sequence(model, seq, qp_config, intra_model)[1], sequences)
            )
            point = aggregate_reports(reports)
            logger.info(
                "rd point",
                extra={"label": label, "dataset": dataset, "qp": qp, "bpp": point.bpp, "psnr": point.psnr},
            )
            points.append(point)
    return RDCurve(label=label, dataset=dataset, points=tuple(points))


class TraceRow(NamedTuple):
    frame_index: int
    bits: float
    bpp: float
    psnr_y: float
    psnr_u: float
    psnr_v: float
    psnr_yuv: float


def per_frame_trace(report: SequenceReport) -> list[TraceRow]:
    return [
        TraceRow(index, bits, bpp, *quality)
        for index, (bits, bpp, quality) in enumerate(
            zip(report.per_frame_bits, report.per_frame_bpp, report.per_frame_quality, strict=True)
        )
    ]


def write_trace_csv(rows: Iterable[TraceRow], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for row in rows:
            writer.writerow([row.frame_index, repr(row.bits), repr(row.bpp), *(repr(v) for v in row[3:])])
    return path


def _read_rows(path: Path, fields: tuple[str, ...]) -> Iterable[tuple[int, dict[str, str]]]:
    if not path.exists():
        raise FileNotFoundError(f"CSV file {path} does not exist")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in fields if f not in (reader.fieldnames or ())]
        if missing:
            raise CsvFormatError(path, 1, f"missing columns {missing}")
        # header is row 1
        for row_number, row in enumerate(reader, start=2):
            yield row_number, row


def read_trace_csv(path: Path) -> list[TraceRow]:
    rows: list[TraceRow] = []
    for number, raw in _read_rows(path, TRACE_FIELDS):
        try:
            rows.append(
                TraceRow(
                    int(raw["frame_index"]),
                    *(float(raw[name]) for name in TRACE_FIELDS[1:]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise CsvFormatError(path, number, str(exc)) from exc
    return rows


def write_curve_csv(curves: Iterable[RDCurve], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_FIELDS)
        for curve in curves:
            for point in curve.points:
                writer.writerow([curve.label, curve.dataset, repr(point.bpp), repr(point.psnr)])
    return path


def read_curve_csv(path: Path) -> list[RDCurve]:
    grouped: dict[tuple[str, str], list[RDPoint]] = {}
    first_row: dict[tuple[str, str], int] = {}
    for number, raw in _read_rows(path, CURVE_FIELDS):
        key = (raw["label"] or "", raw["dataset"] or "")
        if not key[0]:
            raise CsvFormatError(path, number, "empty label")
        try:
            point = RDPoint(bpp=float(raw["bpp"]), psnr=float(raw["psnr"]))
        except ValueError as exc:
            raise CsvFormatError(path, number, str(exc)) from exc
        grouped.setdefault(key, []).append(point)
        first_row.setdefault(key, number)
    curves: list[RDCurve] = []
    for (label, dataset), points in grouped.items():
        try:
            curves.append(RDCurve(label=label, dataset=dataset or "default", points=tuple(points)))
        except ValueError as exc:
            raise CsvFormatError(path, first_row[(label, dataset)], str(exc)) from exc
    return curves


class BdMatrix(NamedTuple):
    values: dict[str, dict[str, float]]
    failures: list[str]


def bd_rate_matrix(curves: Iterable[RDCurve], anchor: str) -> BdMatrix:
    """BD-rate of every method against ``anchor`` on each dataset both cover.

    Pairs without PSNR overlap are recorded as NaN plus a failure message.
    """
    by_method: dict[str, dict[str, RDCurve]] = {}
    for curve in curves:
        by_method.setdefault(curve.label, {})[curve.dataset] = curve
    if anchor not in by_method:
        raise CurveError(f"Anchor '{anchor}' not among methods {sorted(by_method)}")

    values: dict[str, dict[str, float]] = {}
    failures: list[str] = []
    for method, datasets in by_method.items():
        row: dict[str, float] = {}
        for dataset, curve in datasets.items():
            reference = by_method[anchor].get(dataset)
            if reference is None:
                continue
            try:
                row[dataset] = bd_rate(reference, curve)
            except CurveOverlapError as exc:
                logger.warning("bd-rate failed", extra={"method": method, "dataset": dataset, "reason": str(exc)})
                failures.append(f"{method}/{dataset}: {exc}")
                row[dataset] = float("nan")
        values[method] = row
    return BdMatrix(values=values, failures=failures)


def write_bd_matrix_csv(matrix: Mapping[str, Mapping[str, float]], path: Path) -> Path:
    datasets = sorted({d for row in matrix.values() for d in row})
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", *datasets, "average"])
        for method, row in matrix.items():
            cells = [row.get(d, float("nan")) for d in datasets]
            finite = [c for c in cells if math.isfinite(c)]
            average = math.fsum(finite) / len(finite) if finite else float("nan")
            writer.writerow([method, *(f"{c:.4f}" for c in cells), f"{average:.4f}"])
    return path
