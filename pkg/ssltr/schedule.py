"""
Staged training schedules: contiguous iteration spans, each with a constant learning rate
and batch size, preceded by a linear learning-rate warm-up.

The full-scale schedule of every training phase is kept in ``TABLE``;
``schedule_from_table`` scales them down for desk-sized runs.
"""

import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Sequence, Tuple

from ssltr.backbone import HeadSpec
from ssltr.errors import SsltrError
from ssltr.types import AugKind, Phase


class UnknownPhase(SsltrError, ValueError):
    """A schedule was requested for a phase with no table row."""


@dataclass(frozen=True)
class Stage:
    start: int
    stop: int
    lr: float
    batch_size: int

    @property
    def span(self) -> int:
        return self.stop - self.start

    def __contains__(self, iteration: int) -> bool:
        return self.start <= iteration < self.stop


@dataclass(frozen=True)
class Schedule:
    """
    >>> s = Schedule.uniform(100, lr=1e-3, batch_size=4, warmup=10)
    >>> s.total, s.lr_at(0), s.lr_at(50)
    (100, 0.0001, 0.001)
    """

    stages: Tuple[Stage, ...]
    warmup: int = 0
    head: Optional[HeadSpec] = None
    augmentation: AugKind = AugKind.NONE
    phase: Optional[Phase] = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "augmentation", AugKind(self.augmentation))
        if not self.stages:
            raise ValueError("a schedule needs at least one stage")
        expected = 0
        for stage in self.stages:
            if stage.start != expected:
                raise ValueError(
                    f"stages must be contiguous from 0; expected a stage at {expected}, "
                    f"got {stage.start}"
                )
            if stage.stop <= stage.start:
                raise ValueError(f"empty stage {stage.start}-{stage.stop}")
            if stage.lr <= 0:
                raise ValueError(f"learning rate must be positive, got {stage.lr}")
            if stage.batch_size < 1:
                raise ValueError(f"batch size must be positive, got {stage.batch_size}")
            expected = stage.stop
        if self.warmup < 0:
            raise ValueError("warm-up must be non-negative")

    @classmethod
    def uniform(
        cls,
        iterations: int,
        lr: float,
        batch_size: int,
        warmup: int = 0,
        head: Optional[HeadSpec] = None,
        augmentation: AugKind = AugKind.NONE,
    ) -> "Schedule":
        return cls((Stage(0, iterations, lr, batch_size),), warmup, head, augmentation)

    @property
    def total(self) -> int:
        return self.stages[-1].stop

    @property
    def boundaries(self) -> Tuple[int, ...]:
        return tuple(s.stop for s in self.stages)

    def stage_at(self, iteration: int) -> int:
        if not 0 <= iteration < self.total:
            raise IndexError(f"iteration {iteration} outside schedule of {self.total}")
        for i, stage in enumerate(self.stages):
            if iteration in stage:
                return i
        raise AssertionError("unreachable")

    def lr_at(self, iteration: int) -> float:
        lr = self.stages[self.stage_at(iteration)].lr
        if iteration < self.warmup:
            lr = lr * (iteration + 1) / self.warmup
        return lr

    def batch_at(self, iteration: int) -> int:
        return self.stages[self.stage_at(iteration)].batch_size

    def eval_interval(self, iteration: int) -> int:
        """Validation cadence inside the stage holding ``iteration``: 10% of its span."""
        return max(1, math.ceil(self.stages[self.stage_at(iteration)].span / 10))

    def is_eval_point(self, iteration: int) -> bool:
        stage = self.stages[self.stage_at(iteration)]
        done = iteration + 1 - stage.start
        return done % self.eval_interval(iteration) == 0 or iteration + 1 == stage.stop

    def scaled(
        self, scale: float, batch_scale: float = 1.0, max_batch: Optional[int] = None
    ) -> "Schedule":
        """Scale stage boundaries (rounded up, every stage keeps at least one iteration)."""
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        stages = []
        prev = 0
        for stage in self.stages:
            stop = max(prev + 1, math.ceil(stage.stop * scale))
            batch = max(1, round(stage.batch_size * batch_scale))
            if max_batch is not None:
                batch = min(batch, max_batch)
            stages.append(Stage(prev, stop, stage.lr, batch))
            prev = stop
        return replace(self, stages=tuple(stages), warmup=math.ceil(self.warmup * scale))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "phase": self.phase.value if self.phase else None,
            "warmup": self.warmup,
            "head": str(self.head) if self.head else None,
            "augmentation": self.augmentation.value,
            "stages": [
                {"start": s.start, "stop": s.stop, "lr": s.lr, "batch_size": s.batch_size}
                for s in self.stages
            ],
        }


def _rows(bounds: Sequence[int], lrs: Sequence[float], batches: Sequence[int]):
    starts = (0,) + tuple(bounds[:-1])
    return tuple(Stage(a, b, lr, n) for a, b, lr, n in zip(starts, bounds, lrs, batches))


K = 1000

TABLE: Dict[Phase, Schedule] = {
    Phase.MASKED: Schedule(
        _rows((300 * K, 500 * K, 700 * K), (2e-4, 1e-4, 5e-5), (32, 48, 48)),
        warmup=10 * K,
        head=HeadSpec.parse("Linear(4096)"),
        augmentation=AugKind.NONE,
        phase=Phase.MASKED,
    ),
    Phase.AE: Schedule(
        _rows((100 * K, 250 * K, 300 * K), (2e-4, 1e-4, 5e-5), (64, 128, 128)),
        warmup=10 * K,
        augmentation=AugKind.VISUAL,
        phase=Phase.AE,
    ),
    Phase.VICREG: Schedule(
        _rows((120 * K,), (1e-4,), (256,)),
        warmup=25 * K,
        head=HeadSpec.parse("MLP(3, 2048)"),
        augmentation=AugKind.VISUAL,
        phase=Phase.VICREG,
    ),
    Phase.NTXENT: Schedule(
        _rows((30 * K, 100 * K, 120 * K), (1e-4, 5e-5, 5e-5), (256, 256, 256)),
        warmup=25 * K,
        head=HeadSpec.parse("Linear(2048)"),
        augmentation=AugKind.VISUAL,
        phase=Phase.NTXENT,
    ),
    Phase.OCR_SCRATCH: Schedule(
        _rows((150 * K, 250 * K, 300 * K), (2e-4, 1e-4, 5e-5), (32, 48, 64)),
        warmup=10 * K,
        head=HeadSpec.parse("Linear(512)"),
        augmentation=AugKind.ALL,
        phase=Phase.OCR_SCRATCH,
    ),
    Phase.OCR_FINETUNE: Schedule(
        _rows((10 * K, 40 * K, 50 * K), (2e-4, 1e-4, 5e-5), (32, 48, 64)),
        warmup=10 * K,
        head=HeadSpec.parse("Linear(512)"),
        augmentation=AugKind.ALL,
        phase=Phase.OCR_FINETUNE,
    ),
}


def schedule_from_table(
    phase,
    scale: float = 1.0,
    batch_scale: float = 1.0,
    max_batch: Optional[int] = None,
) -> Schedule:
    """
    >>> s = schedule_from_table("ocr_finetune", scale=0.01)
    >>> s.boundaries, s.warmup
    ((100, 400, 500), 100)
    """
    try:
        phase = Phase(phase)
    except ValueError:
        raise UnknownPhase(
            f"unknown phase {phase!r}; expected one of {[p.value for p in Phase]}"
        ) from None
    schedule = TABLE[phase]
    if scale == 1.0 and batch_scale == 1.0 and max_batch is None:
        return schedule
    return schedule.scaled(scale, batch_scale, max_batch)


__all__ = [
    "UnknownPhase",
    "Stage",
    "Schedule",
    "TABLE",
    "schedule_from_table",
]
