"""Long-running training checks on toy clips.

Run with:
    uv run pytest -m integration tests/test_acceptance.py
"""

import math
import statistics
from pathlib import Path

import pytest
import torch

from app.services.codec_model import CodecModel, ModelConfig
from app.services.evaluation import per_frame_trace, read_trace_csv, write_trace_csv
from app.services.media_io import Sequence, synthetic_clip
from app.services.pipeline import CodingConfig, CodingMode, SequenceReport, encode_sequence
from app.services.plotting import plot_trace
from app.services.training import TrainConfig, TrainResult, smoothed, train

pytestmark = pytest.mark.integration

OVERFIT_STEPS = 3000


@pytest.fixture(scope="module")
def overfit_clip() -> Sequence:
    return synthetic_clip(64, 64, 8, name="toy64")


@pytest.fixture(scope="module")
def overfit(tmp_path_factory: pytest.TempPathFactory, overfit_clip: Sequence) -> tuple[CodecModel, TrainResult]:
    torch.manual_seed(0)
    model = CodecModel(ModelConfig())
    config = TrainConfig(
        steps=OVERFIT_STEPS,
        batch=1,
        patch_size=64,
        lr=1e-3,
        fixed_base_qp=63,
        checkpoint_every=OVERFIT_STEPS,
        reference_mode_probs=(1.0, 0.0, 0.0),
    )
    result = train(model, [overfit_clip], config, tmp_path_factory.mktemp("overfit"))
    return model, result


@pytest.fixture(scope="module")
def overfit_report(overfit: tuple[CodecModel, TrainResult], overfit_clip: Sequence) -> SequenceReport:
    model, _ = overfit
    _, report = encode_sequence(model, overfit_clip, CodingConfig(base_qp=63))
    return report


def test_overfit_reaches_35_db(overfit_report: SequenceReport) -> None:
    assert overfit_report.mean_psnr >= 35.0
    assert math.isfinite(overfit_report.total_bits)
    assert overfit_report.total_bits > 0


def test_smoothed_loss_decreases(overfit: tuple[CodecModel, TrainResult]) -> None:
    _, result = overfit
    curve = smoothed(result.losses, 100)

    assert curve[1999] < curve[99]


def test_first_pair_codes_near_later_pairs(overfit_report: SequenceReport) -> None:
    psnr = overfit_report.per_frame_psnr
    first = statistics.fmean(psnr[:2])
    later = statistics.fmean(psnr[2:])

    assert first >= later - 3.0


def _psnr_drop(model: CodecModel, clip: Sequence) -> float:
    looped = Sequence(frames=clip.frames * 4, name="looped")
    _, report = encode_sequence(model, looped, CodingConfig(base_qp=63))
    psnr = report.per_frame_psnr
    return psnr[7] - psnr[63]


def _train_toy(
    seed: int, probs: tuple[float, float, float], clip: Sequence, out: Path, **overrides: object
) -> CodecModel:
    torch.manual_seed(seed)
    model = CodecModel(ModelConfig(latent_channels=32, feature_channels=32, hidden_channels=32))
    values: dict[str, object] = {
        "steps": 1000,
        "batch": 2,
        "patch_size": 32,
        "lr": 1e-3,
        "fixed_base_qp": 63,
        "checkpoint_every": 1000,
        "reference_mode_probs": probs,
        "seed": seed,
    }
    config = TrainConfig.model_validate({**values, **overrides})
    train(model, [clip], config, out)
    return model


def test_hybrid_references_drift_no_more_than_blank_only(tmp_path: Path) -> None:
    clip = synthetic_clip(32, 32, 16, name="toy32")
    drops: dict[str, list[float]] = {"hybrid": [], "blank": []}
    for seed in range(3):
        for name, probs in (("hybrid", (1 / 3, 1 / 3, 1 / 3)), ("blank", (1.0, 0.0, 0.0))):
            model = _train_toy(seed, probs, clip, tmp_path / f"{name}_{seed}")
            drops[name].append(_psnr_drop(model, clip))

    assert statistics.fmean(drops["hybrid"]) <= statistics.fmean(drops["blank"])


# --- coding structure comparisons, all at base QP 63 ---

HYBRID = (1 / 3, 1 / 3, 1 / 3)


def _rd_cost(report: SequenceReport) -> float:
    """Training objective on the coded result: bpp plus lambda-weighted normalized MSE."""
    lam = TrainConfig().lam(63)
    mse = statistics.fmean(10 ** (-psnr / 10) for psnr in report.per_frame_psnr)
    return report.total_bpp + lam * mse


@pytest.fixture(scope="module")
def two_scene_clip() -> Sequence:
    return synthetic_clip(32, 32, 16, kind="scene_cut", cut_at=8, name="two_scenes")


@pytest.fixture(scope="module")
def unified_toy(tmp_path_factory: pytest.TempPathFactory, two_scene_clip: Sequence) -> CodecModel:
    return _train_toy(0, HYBRID, two_scene_clip, tmp_path_factory.mktemp("unified"))


@pytest.fixture(scope="module")
def looped_clip(two_scene_clip: Sequence) -> Sequence:
    return Sequence(frames=two_scene_clip.frames * 4, name="looped_scenes")


def test_two_frame_packets_beat_single_frame_packets(
    tmp_path: Path, unified_toy: CodecModel, two_scene_clip: Sequence, looped_clip: Sequence
) -> None:
    single = _train_toy(0, HYBRID, two_scene_clip, tmp_path / "single", frames_per_packet=1)

    _, paired = encode_sequence(unified_toy, looped_clip, CodingConfig(base_qp=63))
    _, one_by_one = encode_sequence(single, looped_clip, CodingConfig(base_qp=63, frames_per_packet=1))

    assert _rd_cost(paired) < _rd_cost(one_by_one)


def test_unified_model_keeps_up_with_separate_intra_model(
    tmp_path: Path, unified_toy: CodecModel, two_scene_clip: Sequence, looped_clip: Sequence
) -> None:
    intra = _train_toy(0, (1.0, 0.0, 0.0), two_scene_clip, tmp_path / "intra", intra_only=True)
    inter = _train_toy(0, (0.0, 0.5, 0.5), two_scene_clip, tmp_path / "inter")
    divided = CodingConfig(
        base_qp=63, mode=CodingMode.DIVIDED_REFRESH, refresh_period=16, separate_intra=True
    )

    _, unified_report = encode_sequence(unified_toy, looped_clip, CodingConfig(base_qp=63))
    _, divided_report = encode_sequence(inter, looped_clip, divided, intra_model=intra)

    # one set of weights, no refresh, against two specialised models with refresh
    assert _rd_cost(unified_report) <= 1.1 * _rd_cost(divided_report)


def test_scene_cut_trace(tmp_path: Path, unified_toy: CodecModel) -> None:
    clip = synthetic_clip(32, 32, 32, kind="scene_cut", cut_at=16, name="cut")
    _, report = encode_sequence(unified_toy, clip, CodingConfig(base_qp=63))
    rows = per_frame_trace(report)

    trace = write_trace_csv(rows, tmp_path / "cut_trace.csv")
    figure = plot_trace(rows, "bpp", tmp_path / "cut_bpp.png", label="unified")

    bpp = [r.bpp for r in rows]
    psnr = [r.psnr_yuv for r in rows]
    assert read_trace_csv(trace) == rows
    assert figure.stat().st_size > 0
    # new content costs more than the settled frames before it
    assert statistics.fmean(bpp[16:18]) > statistics.fmean(bpp[10:16])
    # and quality does not keep sliding once the new scene is referenced
    assert statistics.fmean(psnr[24:32]) >= statistics.fmean(psnr[16:18]) - 1.0
