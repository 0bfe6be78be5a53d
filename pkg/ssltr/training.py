"""
The shared optimization loop: Adam over a staged ``Schedule``, NaN guarding, a
newline-delimited JSON metrics stream, periodic evaluation and stage-end hooks.
"""

import json
import logging
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Union

import numpy as np
import torch
from tqdm import tqdm

from ssltr.errors import TrainingDiverged
from ssltr.schedule import Schedule

log = logging.getLogger(__name__)

DEVICE_ENV = "SSLTR_DEVICE"


def set_seed(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def select_device(name: Optional[str] = None) -> torch.device:
    """``$SSLTR_DEVICE`` wins over the configured device name."""
    name = os.environ.get(DEVICE_ENV) or name or "cpu"
    return torch.device(name)


def _jsonable(value):
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


class MetricsStream:
    """
    Newline-delimited JSON records. Records are also kept in ``records`` so that
    callers without a file can inspect them.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        self._file = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "a", encoding="utf8")

    def write(self, record: Dict[str, Any]):
        self.records.append(dict(record))
        if self._file is not None:
            self._file.write(json.dumps(record, default=_jsonable) + "\n")
            self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()


class _EvalMode:
    def __init__(self, module: torch.nn.Module):
        self.module = module

    def __enter__(self):
        self.was_training = self.module.training
        self.module.eval()
        self._no_grad = torch.no_grad()
        self._no_grad.__enter__()
        return self.module

    def __exit__(self, *exc):
        self._no_grad.__exit__(*exc)
        self.module.train(self.was_training)


def eval_mode(module: torch.nn.Module) -> _EvalMode:
    """Evaluation mode without gradients; the previous train/eval mode is restored on exit."""
    return _EvalMode(module)


def read_metrics(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, encoding="utf8") as f:
        return [json.loads(line) for line in f if line.strip()]


@dataclass
class StepOutput:
    """Result of one training step; ``loss=None`` marks a no-op step."""

    loss: Optional[torch.Tensor]
    metrics: Dict[str, float] = field(default_factory=dict)


@dataclass
class TrainingLog:
    steps: int = 0
    skipped: int = 0
    last: Dict[str, Any] = field(default_factory=dict)
    evaluations: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return self.steps + self.skipped


Builder = Callable[[int, int], Any]
Step = Callable[[Any, int], StepOutput]


def run_schedule(
    schedule: Schedule,
    parameters: Iterable[torch.nn.Parameter],
    builder: Builder,
    step: Step,
    *,
    stage: str = "train",
    metrics: Optional[MetricsStream] = None,
    log_every: int = 50,
    evaluate: Optional[Callable[[int], Dict[str, Any]]] = None,
    on_stage_end: Optional[Callable[[int, int], None]] = None,
    prefetch: bool = False,
    progress: bool = True,
) -> TrainingLog:
    """
    Run ``schedule.total`` iterations. ``builder(iteration, batch_size)`` prepares a
    batch; ``step(batch, iteration)`` computes the loss. ``evaluate(iteration)`` runs at
    every eval point of the schedule, ``on_stage_end(stage_index, iteration)`` after the
    last iteration of each stage.
    """
    optimizer = torch.optim.Adam(parameters, lr=schedule.lr_at(0))
    metrics = metrics if metrics is not None else MetricsStream()
    result = TrainingLog()
    source = None
    if prefetch:
        from ssltr.prefetch import Prefetcher

        source = Prefetcher(builder, schedule)

    try:
        bar = tqdm(range(schedule.total), desc=stage, disable=not progress, leave=False)
        for it in bar:
            lr = schedule.lr_at(it)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = source.get(it) if source else builder(it, schedule.batch_at(it))
            out = step(batch, it)

            if out.loss is None:
                result.skipped += 1
                value = None
            else:
                value = float(out.loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(stage, it, value)
                optimizer.zero_grad(set_to_none=True)
                out.loss.backward()
                optimizer.step()
                result.steps += 1

            record = {"stage": stage, "iteration": it, "lr": lr, "loss": value, **out.metrics}
            result.last = record
            if it % log_every == 0 or it + 1 == schedule.total:
                metrics.write(record)
                if value is not None:
                    bar.set_postfix(loss=f"{value:.4f}")
                log.debug("%s %d: %s", stage, it, record)

            if evaluate is not None and schedule.is_eval_point(it):
                evaluation = {"stage": stage, "iteration": it, **evaluate(it)}
                metrics.write(evaluation)
                result.evaluations.append(evaluation)

            if on_stage_end is not None and it + 1 in schedule.boundaries:
                on_stage_end(schedule.boundaries.index(it + 1), it + 1)
    finally:
        if source is not None:
            source.kill()

    if result.skipped:
        log.info("%s: %d of %d iterations were no-ops", stage, result.skipped, schedule.total)
    return result


__all__ = [
    "set_seed",
    "select_device",
    "MetricsStream",
    "eval_mode",
    "read_metrics",
    "StepOutput",
    "TrainingLog",
    "run_schedule",
]
