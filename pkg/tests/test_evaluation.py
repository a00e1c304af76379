import logging
import math
from pathlib import Path

import numpy as np
import pytest

from app.services.codec_model import CodecModel
from app.services.evaluation import (
    CsvFormatError,
    CurveError,
    CurveOverlapError,
    PsnrResult,
    RDCurve,
    RDPoint,
    aggregate_reports,
    bd_psnr,
    bd_rate,
    bd_rate_matrix,
    build_rd_curve,
    per_frame_trace,
    psnr_yuv420,
    read_curve_csv,
    read_trace_csv,
    write_bd_matrix_csv,
    write_curve_csv,
    write_trace_csv,
)
from app.services.media_io import Frame, Sequence
from app.services.pipeline import CodingConfig, SequenceReport, encode_sequence
from tests.utils import make_curve, solid_frame


# --- PSNR ---


def test_identical_frames_cap_at_100_db() -> None:
    frame = solid_frame(16, 16, y=90)

    assert psnr_yuv420(frame, frame) == PsnrResult(100.0, 100.0, 100.0, 100.0)


def test_full_scale_error_is_zero_db() -> None:
    result = psnr_yuv420(solid_frame(16, 16, 0, 0, 0), solid_frame(16, 16, 255, 255, 255))

    assert result.psnr_yuv == pytest.approx(0.0, abs=1e-12)


def test_constant_offset_of_16() -> None:
    expected = 10 * math.log10(255**2 / 256)

    result = psnr_yuv420(solid_frame(16, 16, 100, 100, 100), solid_frame(16, 16, 116, 116, 116))

    assert result.psnr_y == pytest.approx(expected)
    assert result.psnr_yuv == pytest.approx(expected)


def test_combined_psnr_weights_plane_errors() -> None:
    # only chroma u differs: combined MSE is 256 / 8
    result = psnr_yuv420(solid_frame(16, 16), solid_frame(16, 16, u=144))

    assert result.psnr_y == 100.0
    assert result.psnr_yuv == pytest.approx(10 * math.log10(255**2 / 32))


def test_psnr_is_symmetric() -> None:
    rng = np.random.default_rng(3)
    a = Frame(
        y_plane=rng.integers(0, 256, (16, 16), dtype=np.uint8),
        u_plane=rng.integers(0, 256, (8, 8), dtype=np.uint8),
        v_plane=rng.integers(0, 256, (8, 8), dtype=np.uint8),
    )
    b = solid_frame(16, 16)

    assert psnr_yuv420(a, b) == psnr_yuv420(b, a)


def test_psnr_rejects_size_mismatch() -> None:
    with pytest.raises(ValueError, match="16x16"):
        psnr_yuv420(solid_frame(16, 16), solid_frame(24, 16))


# --- curves ---


def test_curve_sorts_points_by_rate() -> None:
    curve = make_curve(bpp=(0.4, 0.1, 0.8, 0.2), psnr=(37.0, 32.0, 39.0, 35.0))

    assert curve.bpp.tolist() == [0.1, 0.2, 0.4, 0.8]
    assert curve.psnr.tolist() == [32.0, 35.0, 37.0, 39.0]


def test_curve_needs_four_points() -> None:
    with pytest.raises(ValueError, match="at least 4"):
        make_curve(bpp=(0.1, 0.2, 0.4), psnr=(30.0, 32.0, 34.0))


def test_curve_rejects_repeated_rate() -> None:
    with pytest.raises(ValueError, match="strictly increasing"):
        make_curve(bpp=(0.1, 0.2, 0.2, 0.4), psnr=(30.0, 32.0, 33.0, 34.0))


def test_point_rejects_non_positive_rate() -> None:
    with pytest.raises(ValueError):
        RDPoint(bpp=0.0, psnr=30.0)


def test_curve_warns_when_psnr_drops(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.WARNING, logger="app.services.evaluation"):
        make_curve(label="odd", psnr=(30.0, 33.0, 32.0, 36.0, 38.0))

    assert any("decreases" in r.getMessage() for r in caplog.records)


# --- Bjøntegaard ---


def test_bd_rate_against_itself_is_zero() -> None:
    curve = make_curve()

    assert bd_rate(curve, curve) == pytest.approx(0.0, abs=1e-9)


def test_doubled_rate_is_plus_100_percent() -> None:
    anchor = make_curve()

    assert bd_rate(anchor, anchor.scaled(2.0)) == pytest.approx(100.0, abs=1e-6)


def test_halved_rate_is_minus_50_percent() -> None:
    anchor = make_curve()

    assert bd_rate(anchor, anchor.scaled(0.5)) == pytest.approx(-50.0, abs=1e-6)


def test_bd_rate_accepts_psnr_plateau() -> None:
    plateau = make_curve(bpp=(0.05, 0.1, 0.2, 0.4), psnr=(30.0, 32.0, 32.0, 35.0))

    assert bd_rate(plateau, plateau) == pytest.approx(0.0, abs=1e-9)
    assert bd_rate(plateau, plateau.scaled(2.0)) == pytest.approx(100.0, abs=1e-6)


def test_bd_rate_with_saturated_top_points() -> None:
    # two QPs both hitting the lossless cap
    capped = make_curve(bpp=(0.1, 0.2, 0.4, 0.8, 1.6), psnr=(30.0, 34.0, 38.0, 100.0, 100.0))

    assert bd_rate(capped, capped.scaled(0.5)) == pytest.approx(-50.0, abs=1e-6)
    assert bd_psnr(capped, capped) == pytest.approx(0.0, abs=1e-9)


def test_bd_rate_without_overlap_reports_both_ranges() -> None:
    anchor = make_curve()
    test = make_curve(label="far", psnr=(40.0, 41.0, 42.0, 43.0, 44.0))

    with pytest.raises(CurveOverlapError) as info:
        bd_rate(anchor, test)

    assert info.value.anchor_range == (30.0, 38.5)
    assert info.value.test_range == (40.0, 44.0)
    assert "30.000" in str(info.value) and "44.000" in str(info.value)


def test_bd_psnr_of_uniform_gain() -> None:
    anchor = make_curve()
    better = make_curve(label="better", psnr=tuple(q + 1.0 for q in anchor.psnr.tolist()))

    assert bd_psnr(anchor, better) == pytest.approx(1.0, abs=1e-9)
    assert bd_psnr(anchor, anchor) == pytest.approx(0.0, abs=1e-9)


def test_bd_psnr_without_rate_overlap() -> None:
    anchor = make_curve()

    with pytest.raises(CurveError, match="Rate ranges"):
        bd_psnr(anchor, anchor.scaled(100.0))


# --- aggregation and curve building ---


def _report(name: str, frames: int, bits: float, psnr: float, clip: Sequence) -> SequenceReport:
    return SequenceReport(
        name=name,
        width=16,
        height=16,
        per_frame_bits=[bits] * frames,
        per_frame_quality=[PsnrResult(psnr, psnr, psnr, psnr)] * frames,
        reconstructions=clip,
    )


def test_aggregate_averages_each_sequence_first(clip: Sequence) -> None:
    reports = [_report("short", 2, 256.0, 30.0, clip), _report("long", 4, 128.0, 40.0, clip)]

    point = aggregate_reports(reports)

    assert point.bpp == pytest.approx(0.75)
    assert point.psnr == pytest.approx(35.0)


def test_aggregate_rejects_empty() -> None:
    with pytest.raises(CurveError):
        aggregate_reports([])


def test_rd_curve_does_not_depend_on_qp_order(model: CodecModel, clip: Sequence) -> None:
    config = CodingConfig()

    forward = build_rd_curve(model, [clip], [0, 21, 42, 63], config, label="m")
    shuffled = build_rd_curve(model, [clip], [42, 0, 63, 21], config, label="m", workers=2)

    assert forward == shuffled
    assert list(forward.bpp) == sorted(forward.bpp)


def test_rd_curve_needs_four_qps(model: CodecModel, clip: Sequence) -> None:
    with pytest.raises(CurveError, match="at least 4"):
        build_rd_curve(model, [clip], [10, 20, 30], CodingConfig())


def test_trace_rows_conserve_bits(model: CodecModel, odd_clip: Sequence) -> None:
    packets, report = encode_sequence(model, odd_clip, CodingConfig())

    rows = per_frame_trace(report)

    assert [r.frame_index for r in rows] == list(range(5))
    assert math.fsum(r.bits for r in rows) == pytest.approx(math.fsum(p.rate.total_bits for p in packets))
    assert all(r.bpp == pytest.approx(r.bits / 256) for r in rows)


# --- CSV files ---


def test_trace_csv_keeps_values(tmp_path: Path, model: CodecModel, clip: Sequence) -> None:
    _, report = encode_sequence(model, clip, CodingConfig())
    rows = per_frame_trace(report)

    assert read_trace_csv(write_trace_csv(rows, tmp_path / "t.csv")) == rows


def test_trace_csv_header(tmp_path: Path, model: CodecModel, clip: Sequence) -> None:
    _, report = encode_sequence(model, clip, CodingConfig())

    path = write_trace_csv(per_frame_trace(report), tmp_path / "t.csv")

    assert path.read_text().splitlines()[0] == "frame_index,bits,bpp,psnr_y,psnr_u,psnr_v,psnr_yuv"


def test_curve_csv_groups_by_label_and_dataset(tmp_path: Path) -> None:
    curves = [make_curve("a", dataset="uvg"), make_curve("b", dataset="uvg"), make_curve("a", dataset="hevc")]

    restored = read_curve_csv(write_curve_csv(curves, tmp_path / "c.csv"))

    assert {(c.label, c.dataset) for c in restored} == {("a", "uvg"), ("b", "uvg"), ("a", "hevc")}
    assert restored[0] == curves[0]


def test_malformed_number_names_row(tmp_path: Path) -> None:
    path = tmp_path / "c.csv"
    path.write_text("label,dataset,bpp,psnr\na,d,0.1,30\na,d,abc,31\n")

    with pytest.raises(CsvFormatError, match="row 3") as info:
        read_curve_csv(path)

    assert info.value.row == 3


def test_missing_column_is_row_one(tmp_path: Path) -> None:
    path = tmp_path / "t.csv"
    path.write_text("frame,bits\n0,10\n")

    with pytest.raises(CsvFormatError, match="row 1"):
        read_trace_csv(path)


def test_short_curve_in_csv_points_at_first_row(tmp_path: Path) -> None:
    path = tmp_path / "c.csv"
    path.write_text("label,dataset,bpp,psnr\nok,d,0.1,30\nok,d,0.2,31\nok,d,0.3,32\nok,d,0.4,33\nx,d,0.1,30\n")

    with pytest.raises(CsvFormatError) as info:
        read_curve_csv(path)

    assert info.value.row == 6


def test_missing_csv_raises_file_not_found(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        read_curve_csv(tmp_path / "none.csv")


# --- BD-rate matrix ---


def _matrix_curves() -> list[RDCurve]:
    anchor_a = make_curve("anchor", dataset="a")
    anchor_c = make_curve("anchor", dataset="c")
    return [
        anchor_a,
        anchor_c,
        anchor_a.scaled(2.0, label="heavy"),
        make_curve("heavy", dataset="b"),
        make_curve("heavy", dataset="c", psnr=(45.0, 46.0, 47.0, 48.0, 49.0)),
    ]


def test_matrix_against_anchor() -> None:
    matrix = bd_rate_matrix(_matrix_curves(), "anchor")

    assert matrix.values["anchor"]["a"] == pytest.approx(0.0, abs=1e-9)
    assert matrix.values["heavy"]["a"] == pytest.approx(100.0, abs=1e-6)
    # no anchor curve for dataset b
    assert "b" not in matrix.values["heavy"]
    assert math.isnan(matrix.values["heavy"]["c"])
    assert len(matrix.failures) == 1 and matrix.failures[0].startswith("heavy/c")


def test_matrix_unknown_anchor() -> None:
    with pytest.raises(CurveError, match="missing"):
        bd_rate_matrix(_matrix_curves(), "missing")


def test_matrix_csv_averages_finite_cells(tmp_path: Path) -> None:
    path = write_bd_matrix_csv({"m": {"a": 10.0, "b": 20.0, "c": float("nan")}}, tmp_path / "bd.csv")

    lines = path.read_text().splitlines()

    assert lines[0] == "method,a,b,c,average"
    assert lines[1] == "m,10.0000,20.0000,nan,15.0000"
