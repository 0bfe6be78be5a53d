"""
Text recognition with CTC: loss, greedy decoding, character error rate, training from
scratch or from a checkpoint, and evaluation.
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from ssltr import SUBSAMPLE_FACTOR
from ssltr.augment import AugmentationSet
from ssltr.backbone import (
    HeadSpec,
    LineModel,
    collate_images,
    load_checkpoint,
    replace_head,
    save_checkpoint,
    stack_lines,
)
from ssltr.dataset import Charset, Corpus, Transcription, batches_by_width
from ssltr.errors import EmptyInput, SsltrError
from ssltr.schedule import Schedule
from ssltr.training import MetricsStream, StepOutput, TrainingLog, eval_mode, run_schedule

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


class InfeasibleAlignment(SsltrError, ValueError):
    """A transcription needs more frames than the line provides."""


class EmptyReference(SsltrError, ValueError):
    """The character error rate is undefined for an empty reference."""


class CharsetMismatch(SsltrError, ValueError):
    """A model's output classes do not fit the corpus character set."""


def required_frames(indices: Sequence[int]) -> int:
    """
    Shortest CTC path: one frame per label plus a blank between repeated labels.

    >>> required_frames([1, 1, 2])
    4
    """
    repeats = sum(1 for a, b in zip(indices, indices[1:]) if a == b)
    return len(indices) + repeats


def _indices(transcription, charset: Charset) -> Tuple[int, ...]:
    if isinstance(transcription, Transcription):
        return transcription.indices
    if isinstance(transcription, str):
        return charset.encode(transcription)
    return tuple(int(i) for i in transcription)


def ctc_loss(logits: torch.Tensor, transcription, charset: Charset) -> torch.Tensor:
    """Negative log probability of ``transcription`` under ``L x C`` frame logits."""
    target = _indices(transcription, charset)
    frames = logits.shape[0]
    if required_frames(target) > frames:
        raise InfeasibleAlignment(
            f"{len(target)} characters need {required_frames(target)} frames, got {frames}"
        )
    log_probs = F.log_softmax(logits, dim=-1)[:, None, :]
    return F.ctc_loss(
        log_probs,
        torch.tensor(target, dtype=torch.long, device=logits.device),
        torch.tensor([frames]),
        torch.tensor([len(target)]),
        blank=charset.blank_index,
        reduction="sum",
    )


def ctc_batch_loss(
    logits: torch.Tensor,
    frame_lengths: torch.Tensor,
    targets: Sequence[Sequence[int]],
    blank: int,
) -> torch.Tensor:
    """Mean per-line CTC loss over a padded ``B x L x C`` batch."""
    for row, (target, frames) in enumerate(zip(targets, frame_lengths.tolist())):
        if required_frames(target) > frames:
            raise InfeasibleAlignment(
                f"batch row {row}: {len(target)} characters do not fit {frames} frames"
            )
    log_probs = F.log_softmax(logits, dim=-1).transpose(0, 1)
    flat = torch.tensor([i for t in targets for i in t], dtype=torch.long)
    lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    losses = F.ctc_loss(
        log_probs,
        flat.to(logits.device),
        frame_lengths.cpu(),
        lengths,
        blank=blank,
        reduction="none",
    )
    return losses.mean()


def best_path(logits: Union[torch.Tensor, np.ndarray], blank: int) -> List[int]:
    """Per-frame argmax, consecutive repeats collapsed, blanks removed."""
    path = np.asarray(torch.as_tensor(logits).argmax(dim=-1).cpu())
    out = []
    prev = None
    for label in path.tolist():
        if label != prev and label != blank:
            out.append(label)
        prev = label
    return out


def greedy_decode(logits: Union[torch.Tensor, np.ndarray], charset: Charset) -> str:
    """Best-path decoding; padding classes of a fixed-capacity charset are dropped."""
    return charset.decode(i for i in best_path(logits, charset.blank_index) if i < len(charset))


class EditCounts(NamedTuple):
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_operations(hypothesis: str, reference: str) -> EditCounts:
    """
    Levenshtein distance with unit costs and one optimal split into operations.

    >>> edit_operations("kitten", "sitting")
    EditCounts(distance=3, substitutions=2, insertions=0, deletions=1)
    """
    n, m = len(hypothesis), len(reference)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if hypothesis[i - 1] == reference[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + cost)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (hypothesis[i - 1] != reference[j - 1]):
            subs += int(hypothesis[i - 1] != reference[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            # extra hypothesis character
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return EditCounts(int(d[n, m]), subs, ins, dels)


def cer(hypothesis: str, reference: str) -> float:
    """
    >>> cer("", "abc")
    1.0
    """
    if not reference:
        raise EmptyReference("CER is undefined for an empty reference")
    return edit_operations(hypothesis, reference).distance / len(reference)


@dataclass
class EvalReport:
    corpus: str
    cer: float
    distances: List[int]
    reference_lengths: List[int]
    substitutions: int
    insertions: int
    deletions: int
    predictions: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def lines(self) -> int:
        return len(self.distances)

    def to_record(self) -> Dict[str, Any]:
        return {
            "corpus": self.corpus,
            "cer": self.cer,
            "lines": self.lines,
            "edits": int(sum(self.distances)),
            "characters": int(sum(self.reference_lengths)),
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
        }

    def format_table(self) -> str:
        r = self.to_record()
        rows = [
            ("corpus", r["corpus"]),
            ("lines", r["lines"]),
            ("characters", r["characters"]),
            ("substitutions", r["substitutions"]),
            ("insertions", r["insertions"]),
            ("deletions", r["deletions"]),
            ("CER", f"{100 * r['cer']:.2f}%"),
        ]
        return "\n".join(f"{name:<14}{value}" for name, value in rows)

    def write_predictions(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf8") as f:
            for line_id, text in self.predictions:
                f.write(f"{line_id}\t{text}\n")
        return path

    def write_json(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf8") as f:
            json.dump(self.to_record(), f, indent=2)
        return path


def predict(
    model: LineModel,
    corpus: Corpus,
    charset: Optional[Charset] = None,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
) -> List[str]:
    charset = charset or corpus.charset
    texts: List[Optional[str]] = [None] * len(corpus)
    with eval_mode(model):
        for group in batches_by_width(corpus, batch_size):
            images, widths = collate_images([corpus[i].image for i in group], device)
            logits = model(images, widths)
            for row, i in enumerate(group):
                texts[i] = greedy_decode(logits[row, : corpus[i].image.frames], charset)
    return texts


def evaluate(
    model: LineModel,
    corpus: Corpus,
    charset: Optional[Charset] = None,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
) -> EvalReport:
    if not corpus.is_annotated():
        raise ValueError(f"corpus {corpus.name!r} has lines without transcriptions")
    hypotheses = predict(model, corpus, charset, batch_size, device)
    distances, lengths = [], []
    subs = ins = dels = 0
    for entry, hyp in zip(corpus, hypotheses):
        counts = edit_operations(hyp, entry.text)
        distances.append(counts.distance)
        lengths.append(len(entry.text))
        subs += counts.substitutions
        ins += counts.insertions
        dels += counts.deletions
    total = sum(lengths)
    if total == 0:
        raise EmptyReference(f"corpus {corpus.name!r} has no reference characters")
    return EvalReport(
        corpus.name,
        sum(distances) / total,
        distances,
        lengths,
        subs,
        ins,
        dels,
        list(zip(corpus.ids, hypotheses)),
    )


@dataclass
class OcrBatchBuilder:
    """Picklable source of augmented, annotated batches; pure in ``(seed, iteration)``."""

    corpus: Corpus
    augmentation: AugmentationSet = field(default_factory=AugmentationSet.all)
    seed: int = 0

    def __call__(self, iteration: int, batch_size: int):
        rng = np.random.default_rng([self.seed, iteration])
        picks = rng.choice(len(self.corpus), batch_size, replace=len(self.corpus) < batch_size)
        images, targets = [], []
        for i in picks:
            entry = self.corpus[int(i)]
            image = self.augmentation.apply(entry.image, int(rng.integers(2**31)))
            if image.frames < required_frames(entry.transcription.indices):
                # geometry squeezed the line below its alignment length
                image = entry.image
            images.append(image)
            targets.append(entry.transcription.indices)
        batch, widths = stack_lines(images)
        return {"images": batch, "widths": widths, "targets": targets}


def _feasible(corpus: Corpus) -> Corpus:
    keep = [
        i
        for i, e in enumerate(corpus)
        if e.image.frames >= required_frames(e.transcription.indices)
    ]
    if len(keep) < len(corpus):
        log.warning(
            "Dropping %d lines of %r whose text needs more frames than the image has",
            len(corpus) - len(keep),
            corpus.name,
        )
        return corpus.take(keep, name=corpus.name)
    return corpus


@dataclass
class OcrResult:
    model: LineModel
    log: TrainingLog
    best_cer: Optional[float] = None
    best_iteration: Optional[int] = None


def prepare_ocr_model(
    model_or_checkpoint: Union[LineModel, PathLike],
    charset: Charset,
    keep_head: bool = False,
    seed: Optional[int] = None,
) -> LineModel:
    """
    Load the starting point and make sure its head is ``Linear(|charset| + 1)``. A head
    trained for this exact charset is kept; any other head is replaced.
    """
    if isinstance(model_or_checkpoint, LineModel):
        model, trained_for = model_or_checkpoint, None
        matches = model.output_size == charset.num_classes
    else:
        model, extra = load_checkpoint(model_or_checkpoint)
        trained_for = extra.get("charset")
        matches = (
            trained_for is not None
            and tuple(trained_for) == charset.symbols
            and model.output_size == charset.num_classes
        )
    if matches:
        return model
    if keep_head:
        raise CharsetMismatch(
            f"model head has {model.output_size} outputs, charset needs {charset.num_classes}"
        )
    replace_head(model, HeadSpec.linear(charset.num_classes), seed)
    return model


def train_ocr(
    model_or_checkpoint: Union[LineModel, PathLike],
    corpus: Corpus,
    schedule: Schedule,
    augmentation: Optional[AugmentationSet] = None,
    charset: Optional[Charset] = None,
    seed: int = 0,
    validation: Optional[Corpus] = None,
    metrics: Optional[MetricsStream] = None,
    checkpoint_dir: Optional[PathLike] = None,
    keep_head: bool = False,
    stage: str = "ocr",
    device: Union[str, torch.device] = "cpu",
    prefetch: bool = False,
    log_every: int = 50,
    progress: bool = True,
) -> OcrResult:
    """
    CTC training. When ``validation`` is given, CER is measured at every eval point and
    the best-validation weights are restored at the end (and saved as ``<stage>_best.pt``).
    A checkpoint given as a path is only read.
    """
    if len(corpus) == 0:
        raise EmptyInput("cannot train OCR on an empty corpus")
    if not corpus.is_annotated():
        raise ValueError(f"corpus {corpus.name!r} has lines without transcriptions")
    charset = charset or corpus.charset
    missing = sorted({ch for e in corpus for ch in e.text} - set(charset.symbols))
    if missing:
        raise CharsetMismatch(f"characters {''.join(missing)!r} are not in the charset")
    corpus = _feasible(corpus.with_charset(charset))
    model = prepare_ocr_model(model_or_checkpoint, charset, keep_head, seed).to(device)
    augmentation = augmentation or AugmentationSet.for_kind(schedule.augmentation)
    builder = OcrBatchBuilder(corpus, augmentation, seed)
    extra = {"charset": list(charset.symbols), "capacity": charset.capacity}
    best: Dict[str, Any] = {}

    def step(batch, iteration):
        model.train()
        images = torch.from_numpy(batch["images"]).to(device)
        widths = torch.from_numpy(batch["widths"]).to(device)
        logits = model(images, widths)
        frames = torch.div(widths + SUBSAMPLE_FACTOR - 1, SUBSAMPLE_FACTOR, rounding_mode="floor")
        loss = ctc_batch_loss(logits, frames, batch["targets"], charset.blank_index)
        return StepOutput(loss)

    def evaluate_validation(iteration):
        report = evaluate(model, validation, charset, device=device)
        if "cer" not in best or report.cer < best["cer"]:
            best.update(cer=report.cer, iteration=iteration, state=copy.deepcopy(model.state_dict()))
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"{stage}_best.pt", model, extra)
        return {"val_cer": report.cer}

    def on_stage_end(index, iteration):
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"{stage}_stage{index + 1}.pt", model, extra)

    result = run_schedule(
        schedule,
        model.parameters(),
        builder,
        step,
        stage=stage,
        metrics=metrics,
        evaluate=evaluate_validation if validation is not None and len(validation) else None,
        on_stage_end=on_stage_end,
        prefetch=prefetch,
        log_every=log_every,
        progress=progress,
    )
    if "state" in best:
        model.load_state_dict(best["state"])
        log.info("%s: best validation CER %.4f at iteration %d", stage, best["cer"], best["iteration"])
    model.eval()
    return OcrResult(model, result, best.get("cer"), best.get("iteration"))


__all__ = [
    "InfeasibleAlignment",
    "EmptyReference",
    "CharsetMismatch",
    "required_frames",
    "ctc_loss",
    "ctc_batch_loss",
    "best_path",
    "greedy_decode",
    "EditCounts",
    "edit_operations",
    "cer",
    "EvalReport",
    "predict",
    "evaluate",
    "OcrBatchBuilder",
    "OcrResult",
    "prepare_ocr_model",
    "train_ocr",
]
