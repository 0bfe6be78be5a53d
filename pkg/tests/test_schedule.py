import pytest

from ssltr.schedule import TABLE, Schedule, Stage, UnknownPhase, schedule_from_table
from ssltr.types import AugKind, HeadKind, Phase


def test_full_scale_rows():
    masked = TABLE[Phase.MASKED]
    assert masked.boundaries == (300_000, 500_000, 700_000)
    assert [s.lr for s in masked.stages] == [2e-4, 1e-4, 5e-5]
    assert [s.batch_size for s in masked.stages] == [32, 48, 48]
    assert masked.warmup == 10_000
    assert str(masked.head) == "Linear(4096)"

    vicreg = TABLE[Phase.VICREG]
    assert vicreg.total == 120_000
    assert vicreg.head.kind is HeadKind.MLP
    assert vicreg.augmentation is AugKind.VISUAL

    assert TABLE[Phase.OCR_SCRATCH].augmentation is AugKind.ALL
    assert TABLE[Phase.OCR_FINETUNE].boundaries == (10_000, 40_000, 50_000)


def test_scaled_schedule_keeps_proportions():
    # given: the fine-tuning row at a hundredth of its length
    schedule = schedule_from_table(Phase.OCR_FINETUNE, scale=0.01, max_batch=16)

    # then: boundaries and warm-up shrink and batches are capped
    assert schedule.boundaries == (100, 400, 500)
    assert schedule.warmup == 100
    assert {s.batch_size for s in schedule.stages} == {16}

    # and: the learning rates are unchanged
    assert [s.lr for s in schedule.stages] == [2e-4, 1e-4, 5e-5]


def test_tiny_scale_keeps_every_stage():
    schedule = schedule_from_table("masked", scale=1e-9)
    assert schedule.boundaries == (1, 2, 3)


def test_unknown_phase():
    with pytest.raises(UnknownPhase):
        schedule_from_table("finetune")


def test_learning_rate_and_batch_lookup():
    schedule = Schedule(
        (Stage(0, 10, 1e-3, 2), Stage(10, 30, 5e-4, 4)), warmup=5
    )
    assert schedule.lr_at(0) == pytest.approx(2e-4)
    assert schedule.lr_at(4) == pytest.approx(1e-3)
    assert schedule.lr_at(10) == pytest.approx(5e-4)
    assert schedule.batch_at(9) == 2
    assert schedule.batch_at(10) == 4
    with pytest.raises(IndexError):
        schedule.stage_at(30)


def test_eval_points_every_tenth_of_a_stage():
    schedule = Schedule((Stage(0, 100, 1e-3, 2), Stage(100, 120, 1e-3, 2)))
    points = [it for it in range(schedule.total) if schedule.is_eval_point(it)]
    first = [it + 1 for it in points if it < 100]
    second = [it + 1 - 100 for it in points if it >= 100]
    assert first == list(range(10, 101, 10))
    assert second == list(range(2, 21, 2))


def test_stages_must_be_contiguous():
    with pytest.raises(ValueError):
        Schedule((Stage(0, 10, 1e-3, 2), Stage(11, 20, 1e-3, 2)))
    with pytest.raises(ValueError):
        Schedule((Stage(0, 10, 0.0, 2),))


def test_to_dict():
    d = schedule_from_table(Phase.NTXENT, scale=0.001).to_dict()
    assert d["phase"] == "ntxent"
    assert d["head"] == "Linear(2048)"
    assert d["stages"][0] == {"start": 0, "stop": 30, "lr": 1e-4, "batch_size": 256}
