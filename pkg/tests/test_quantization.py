import math

import pytest
import torch

from app.services.quantization import (
    MAX_QP,
    QpPair,
    QpSchedule,
    QuantizationConfigError,
    QuantTable,
    TableSide,
    lambda_for_qp,
    lookup_pair_gains,
    packet_qp_pair,
    qp_pair_for,
    schedule_qp,
)


def test_schedule_applies_bias_pattern() -> None:
    schedule = QpSchedule(base_qp=20)

    assert [schedule_qp(schedule, i) for i in range(8)] == [20, 28, 20, 24, 20, 24, 20, 24]
    assert schedule_qp(schedule, 9) == 28


@pytest.mark.parametrize("base_qp", [0, 20, 42, 55])
def test_schedule_repeats_every_eight_frames(base_qp: int) -> None:
    schedule = QpSchedule(base_qp=base_qp)

    qps = [schedule_qp(schedule, i) for i in range(64)]

    assert all(qps[i] == qps[i + 8] for i in range(56))
    assert qps[:8] == [base_qp + b for b in schedule.bias]


def test_single_frame_packet_uses_frame_qp_on_both_sides() -> None:
    schedule = QpSchedule(base_qp=32)

    assert [packet_qp_pair(schedule, i, 1) for i in range(3)] == [QpPair(32, 32), QpPair(40, 40), QpPair(32, 32)]
    assert packet_qp_pair(schedule, 1) == qp_pair_for(schedule, 1)


def test_packet_qp_pair_rejects_other_packet_sizes() -> None:
    with pytest.raises(QuantizationConfigError):
        packet_qp_pair(QpSchedule(base_qp=0), 0, 3)


def test_schedule_clamps_to_max_qp() -> None:
    schedule = QpSchedule(base_qp=60)

    assert [schedule_qp(schedule, i) for i in range(4)] == [60, 63, 60, 63]


def test_negative_frame_index_raises() -> None:
    with pytest.raises(QuantizationConfigError):
        schedule_qp(QpSchedule(base_qp=0), -1)


def test_schedule_rejects_short_bias() -> None:
    with pytest.raises(ValueError):
        QpSchedule(base_qp=0, bias=(0, 8))


def test_base_qp_outside_range_rejected() -> None:
    with pytest.raises(ValueError):
        QpSchedule(base_qp=64)


@pytest.mark.parametrize("base_qp", [0, 17, 32, 55, 63])
def test_second_frame_of_pair_never_gets_lower_qp(base_qp: int) -> None:
    schedule = QpSchedule(base_qp=base_qp)

    for pair_index in range(8):
        pair = qp_pair_for(schedule, pair_index)
        assert pair.qp_second >= pair.qp_first


def test_qp_pair_for_first_pair() -> None:
    assert qp_pair_for(QpSchedule(base_qp=32), 0) == QpPair(32, 40)
    assert qp_pair_for(QpSchedule(base_qp=32), 1) == QpPair(32, 36)


def test_lambda_endpoints_and_monotone() -> None:
    values = [lambda_for_qp(q, 0.4, 768.0) for q in range(MAX_QP + 1)]

    assert values[0] == pytest.approx(0.4)
    assert values[-1] == pytest.approx(768.0)
    assert all(b > a for a, b in zip(values, values[1:]))


def test_fresh_table_starts_at_unit_gain_and_grows() -> None:
    table = QuantTable(4, TableSide.FIRST_OF_PAIR)
    gains = table.gains()

    assert gains.shape == (64, 4)
    assert torch.allclose(gains[0], torch.ones(4))
    assert float(gains[63, 0]) == pytest.approx(math.exp(63 * 0.06), rel=1e-4)


def test_gains_stay_monotone_after_random_parameters() -> None:
    torch.manual_seed(3)
    table = QuantTable(6, TableSide.SECOND_OF_PAIR)
    with torch.no_grad():
        table.raw.normal_(0.0, 5.0)
        table.log_g_min.normal_(0.0, 2.0)

    gains = table.gains()

    assert bool((gains[1:] >= gains[:-1]).all())
    assert bool((gains > 0).all())


def test_table_rejects_qp_out_of_range() -> None:
    table = QuantTable(2, TableSide.FIRST_OF_PAIR)

    with pytest.raises(QuantizationConfigError):
        table(64)


def test_pair_lookup_concatenates_halves() -> None:
    first = QuantTable(3, TableSide.FIRST_OF_PAIR)
    second = QuantTable(3, TableSide.SECOND_OF_PAIR)
    with torch.no_grad():
        second.log_g_min.fill_(1.0)

    gains = lookup_pair_gains(first, second, QpPair(0, 0))

    assert gains.shape == (6,)
    assert torch.allclose(gains[:3], torch.ones(3))
    assert torch.allclose(gains[3:], torch.full((3,), math.e))


def test_pair_lookup_rejects_channel_mismatch() -> None:
    with pytest.raises(QuantizationConfigError):
        lookup_pair_gains(
            QuantTable(3, TableSide.FIRST_OF_PAIR),
            QuantTable(4, TableSide.SECOND_OF_PAIR),
            QpPair(0, 0),
        )
