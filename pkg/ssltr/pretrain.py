"""
Pre-training objectives and loops.

Masked label prediction hides 40x8 slices behind uniform noise and classifies the
discrete label of every hidden frame. Joint-embedding training forwards two shifted views
of a line through the same model and makes corresponding frame outputs agree, either with
VICReg over the whole batch or with NT-Xent inside every line.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from ssltr import LINE_HEIGHT, SUBSAMPLE_FACTOR
from ssltr.augment import AugmentationSet, make_view_pair
from ssltr.backbone import (
    HeadSpec,
    LineModel,
    head_forward,
    replace_head,
    save_checkpoint,
    stack_lines,
)
from ssltr.dataset import Corpus, LineImage, pad_width
from ssltr.errors import EmptyInput, SsltrError
from ssltr.frames import padded_width
from ssltr.labelgen import LabelManifest, LabelMisalignment
from ssltr.schedule import Schedule
from ssltr.training import MetricsStream, StepOutput, TrainingLog, eval_mode, run_schedule
from ssltr.types import Criterion, Style

log = logging.getLogger(__name__)

MASK_PROBABILITY = 0.2
TOPK = (1, 3, 10)
IGNORE_LABEL = -100

PathLike = Union[str, Path]


class EmptyOverlap(SsltrError, ValueError):
    """Two views share no frames."""


class ZeroNormEmbedding(SsltrError, ValueError):
    """An embedding cannot be normalized because its norm is zero."""


# -- masking ----------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    masked_frames: np.ndarray
    p: float = MASK_PROBABILITY

    @property
    def count(self) -> int:
        return int(self.masked_frames.size)


def mask_slices(image: LineImage, p: float = MASK_PROBABILITY, seed: int = 0):
    """
    Replace every 40x8 slice independently with probability ``p`` by uniform noise.
    The image is right-padded to a whole number of frames first.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"masking probability must be in [0, 1], got {p}")
    if image.height != LINE_HEIGHT:
        raise ValueError(f"line {image.id!r} has height {image.height}, expected {LINE_HEIGHT}")
    pixels = pad_width(image.pixels, padded_width(image.width)).copy()
    rng = np.random.default_rng(seed)
    frames = pixels.shape[1] // SUBSAMPLE_FACTOR
    masked = np.flatnonzero(rng.random(frames) < p)
    for i in masked:
        x0 = int(i) * SUBSAMPLE_FACTOR
        pixels[:, x0 : x0 + SUBSAMPLE_FACTOR] = rng.random(
            (LINE_HEIGHT, SUBSAMPLE_FACTOR), dtype=np.float32
        )
    return image.with_pixels(pixels), MaskSpec(masked, p)


@dataclass
class MaskedBatchBuilder:
    """Picklable source of masked batches; pure in ``(seed, iteration)``."""

    corpus: Corpus
    labels: LabelManifest
    p: float = MASK_PROBABILITY
    seed: int = 0

    def line(self, index: int, seed: int):
        entry = self.corpus[index]
        labels = self.labels[entry.id]
        if len(labels) != entry.image.frames:
            raise LabelMisalignment(
                f"line {entry.id!r} has {len(labels)} labels for {entry.image.frames} frames"
            )
        masked, spec = mask_slices(entry.image, self.p, seed)
        return masked, labels, spec

    def collate(self, lines) -> Dict[str, np.ndarray]:
        images, widths = stack_lines([m for m, _, _ in lines])
        length = images.shape[-1] // SUBSAMPLE_FACTOR
        labels = np.full((len(lines), length), IGNORE_LABEL, dtype=np.int64)
        mask = np.zeros((len(lines), length), dtype=bool)
        for row, (_, seq, spec) in enumerate(lines):
            labels[row, : len(seq)] = seq
            mask[row, spec.masked_frames[spec.masked_frames < len(seq)]] = True
        return {"images": images, "widths": widths, "labels": labels, "mask": mask}

    def __call__(self, iteration: int, batch_size: int) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng([self.seed, iteration])
        picks = rng.choice(len(self.corpus), batch_size, replace=len(self.corpus) < batch_size)
        seeds = rng.integers(0, 2**31, batch_size)
        return self.collate([self.line(int(i), int(s)) for i, s in zip(picks, seeds)])


# -- masked label prediction ------------------------------------------------------


@dataclass
class TopKReport:
    """Error rates at masked positions: ``errors[k]`` is the miss rate of the top ``k``."""

    errors: Dict[int, float]
    count: int = 0

    @property
    def top1(self) -> float:
        return self.errors[1]

    @property
    def top3(self) -> float:
        return self.errors[3]

    @property
    def top10(self) -> float:
        return self.errors[10]

    def to_record(self) -> Dict[str, float]:
        return {f"top{k}_error": v for k, v in self.errors.items()}


def label_ranks(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """0-based rank of the true label; equal logits rank the lower class index first."""
    true = logits.gather(1, labels[:, None])
    classes = torch.arange(logits.shape[1], device=logits.device)[None, :]
    ahead = (logits > true) | ((logits == true) & (classes < labels[:, None]))
    return ahead.sum(dim=1)


def topk_error(
    logits_at_masked: torch.Tensor, labels: torch.Tensor, ks: Sequence[int] = TOPK
) -> TopKReport:
    """
    >>> logits = torch.tensor([[0.0, 2.0, 1.0], [3.0, 2.0, 1.0]])
    >>> topk_error(logits, torch.tensor([2, 0]), ks=(1, 2)).errors
    {1: 0.5, 2: 0.0}
    """
    if logits_at_masked.shape[0] == 0:
        raise EmptyInput("top-k error is undefined without masked frames")
    ranks = label_ranks(logits_at_masked.detach(), labels)
    n = ranks.numel()
    return TopKReport({k: float((ranks >= k).sum()) / n for k in ks}, n)


def masked_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor
) -> Optional[torch.Tensor]:
    """Cross-entropy over masked frames only; ``None`` when nothing is masked."""
    if not bool(mask.any()):
        return None
    return F.cross_entropy(logits[mask], labels[mask])


def _to_device(batch: Dict[str, np.ndarray], device) -> Dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.asarray(v)).to(device) for k, v in batch.items()}


def masked_step(
    model: LineModel,
    batch: Dict[str, np.ndarray],
    num_classes: int,
    device: Union[str, torch.device] = "cpu",
) -> Tuple[Optional[torch.Tensor], Optional[TopKReport]]:
    """
    Loss and top-k report on one masked batch; ``(None, None)`` when no frame is masked.
    The caller applies the gradient.
    """
    t = _to_device(batch, device)
    if not bool(t["mask"].any()):
        return None, None
    features, _ = model.backbone(t["images"], t["widths"])
    logits = head_forward(features, model.head, expected_size=num_classes)
    mask = t["mask"][:, : logits.shape[1]]
    labels = t["labels"][:, : logits.shape[1]]
    loss = masked_cross_entropy(logits, labels, mask)
    return loss, topk_error(logits[mask], labels[mask])


def masked_evaluate(
    model: LineModel,
    corpus: Corpus,
    labels: LabelManifest,
    p: float = MASK_PROBABILITY,
    seed: int = 0,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
) -> TopKReport:
    """Top-k errors at masked positions of ``corpus`` with deterministic per-line masks."""
    builder = MaskedBatchBuilder(corpus, labels, p, seed)
    hits: List[torch.Tensor] = []
    with eval_mode(model):
        for start in range(0, len(corpus), batch_size):
            lines = [
                builder.line(i, seed * 1_000_003 + i)
                for i in range(start, min(len(corpus), start + batch_size))
            ]
            t = _to_device(builder.collate(lines), device)
            logits = model(t["images"], t["widths"])
            mask = t["mask"][:, : logits.shape[1]]
            if mask.any():
                hits.append(label_ranks(logits[mask], t["labels"][:, : logits.shape[1]][mask]))
    if not hits:
        raise EmptyInput("no frame of the evaluation corpus was masked")
    ranks = torch.cat(hits)
    return TopKReport({k: float((ranks >= k).sum()) / ranks.numel() for k in TOPK}, ranks.numel())


def train_masked(
    model: LineModel,
    corpus: Corpus,
    labels: LabelManifest,
    schedule: Schedule,
    p: float = MASK_PROBABILITY,
    seed: int = 0,
    heldout: Optional[Corpus] = None,
    metrics: Optional[MetricsStream] = None,
    checkpoint_dir: Optional[PathLike] = None,
    device: Union[str, torch.device] = "cpu",
    prefetch: bool = False,
    log_every: int = 50,
    progress: bool = True,
) -> Tuple[LineModel, TrainingLog]:
    labels.check_alignment(corpus)
    if heldout is not None:
        labels.check_alignment(heldout)
    if model.output_size != labels.k:
        replace_head(model, HeadSpec.linear(labels.k), seed)
    model.to(device)
    builder = MaskedBatchBuilder(corpus, labels, p, seed)

    def step(batch, iteration):
        model.train()
        loss, report = masked_step(model, batch, labels.k, device)
        return StepOutput(loss, report.to_record() if report else {})

    def evaluate(iteration):
        report = masked_evaluate(model, heldout, labels, p, seed, device=device)
        return {f"heldout_{k}": v for k, v in report.to_record().items()}

    def on_stage_end(index, iteration):
        if checkpoint_dir is not None:
            save_checkpoint(
                Path(checkpoint_dir) / f"masked_stage{index + 1}.pt",
                model,
                {"phase": "masked", "iteration": iteration, "k": labels.k},
            )

    result = run_schedule(
        schedule,
        model.parameters(),
        builder,
        step,
        stage="masked",
        metrics=metrics,
        evaluate=evaluate if heldout is not None and len(heldout) else None,
        on_stage_end=on_stage_end,
        prefetch=prefetch,
        log_every=log_every,
        progress=progress,
    )
    return model, result


# -- joint embedding --------------------------------------------------------------


class VICRegTerms(NamedTuple):
    total: torch.Tensor
    invariance: torch.Tensor
    variance: torch.Tensor
    covariance: torch.Tensor


def _off_diagonal(m: torch.Tensor) -> torch.Tensor:
    n = m.shape[0]
    return m.flatten()[:-1].view(n - 1, n + 1)[:, 1:].flatten()


def vicreg_loss(
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    invariance_weight: float = 25.0,
    variance_weight: float = 25.0,
    covariance_weight: float = 1.0,
    gamma: float = 1.0,
    eps: float = 1e-4,
) -> VICRegTerms:
    """
    VICReg over ``N`` corresponding pairs. The variance and covariance terms are summed
    over both branches; covariance uses the unbiased estimate and is divided by ``D``.
    """
    if z_a.shape != z_b.shape or z_a.dim() != 2:
        raise ValueError(f"expected two N x D inputs, got {tuple(z_a.shape)} and {tuple(z_b.shape)}")
    n, d = z_a.shape
    if n < 2:
        raise ValueError("VICReg variance needs at least 2 embeddings")

    invariance = F.mse_loss(z_a, z_b)

    def variance(z):
        std = torch.sqrt(z.var(dim=0) + eps)
        return F.relu(gamma - std).mean()

    def covariance(z):
        z = z - z.mean(dim=0)
        cov = (z.T @ z) / (n - 1)
        return _off_diagonal(cov).pow(2).sum() / d

    var = variance(z_a) + variance(z_b)
    cov = covariance(z_a) + covariance(z_b)
    total = invariance_weight * invariance + variance_weight * var + covariance_weight * cov
    return VICRegTerms(total, invariance, var, cov)


def _normalize(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ZeroNormEmbedding("cannot normalize a zero embedding")
    return z / norms


def ntxent_loss(
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    overlap: Tuple[Sequence[int], Sequence[int]],
    temperature: float = 0.1,
) -> torch.Tensor:
    """
    NT-Xent inside one line. For every corresponding pair ``(i, j)`` in ``overlap`` the
    anchor ``z_a[i]`` must pick ``z_b[j]`` among all frames of ``z_b``, and symmetrically.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    idx_a = torch.as_tensor(np.asarray(overlap[0]), dtype=torch.long, device=z_a.device)
    idx_b = torch.as_tensor(np.asarray(overlap[1]), dtype=torch.long, device=z_a.device)
    if idx_a.numel() == 0:
        raise EmptyOverlap("views have no corresponding frames")
    a, b = _normalize(z_a), _normalize(z_b)
    logits_ab = a[idx_a] @ b.T / temperature
    logits_ba = b[idx_b] @ a.T / temperature
    return (F.cross_entropy(logits_ab, idx_b) + F.cross_entropy(logits_ba, idx_a)) / 2


def default_crop_width(style) -> int:
    return 256 if Style(style) is Style.CURSIVE else 512


@dataclass
class JointConfig:
    criterion: Criterion = Criterion.VICREG
    temperature: float = 0.1
    invariance_weight: float = 25.0
    variance_weight: float = 25.0
    covariance_weight: float = 1.0
    gamma: float = 1.0
    eps: float = 1e-4
    crop_width: int = 512
    crop_width_doubling_step: Optional[int] = 100_000
    shift: bool = True

    def __post_init__(self):
        self.criterion = Criterion(self.criterion)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.crop_width <= 0 or self.crop_width % SUBSAMPLE_FACTOR:
            raise ValueError(f"crop width {self.crop_width} is not a multiple of 8")

    def crop_width_at(self, iteration: int) -> int:
        """
        >>> JointConfig(crop_width=256, crop_width_doubling_step=1000).crop_width_at(1000)
        512
        """
        step = self.crop_width_doubling_step
        if step is not None and iteration >= step:
            return 2 * self.crop_width
        return self.crop_width


@dataclass
class ViewPairBatchBuilder:
    """Picklable source of shifted view-pair batches; pure in ``(seed, iteration)``."""

    corpus: Corpus
    config: JointConfig = field(default_factory=JointConfig)
    augmentation: AugmentationSet = field(default_factory=AugmentationSet.visual)
    seed: int = 0

    def __post_init__(self):
        self._usable = [i for i, e in enumerate(self.corpus) if e.image.width >= 2 * SUBSAMPLE_FACTOR]
        if not self._usable:
            raise ValueError(f"corpus {self.corpus.name!r} has no line wide enough for two views")

    def __call__(self, iteration: int, batch_size: int):
        rng = np.random.default_rng([self.seed, iteration])
        crop = self.config.crop_width_at(iteration)
        picks = rng.choice(len(self._usable), batch_size, replace=len(self._usable) < batch_size)
        pairs = [
            make_view_pair(
                self.corpus[self._usable[int(i)]].image,
                crop,
                int(rng.integers(2**31)),
                self.augmentation,
                self.config.shift,
            )
            for i in picks
        ]
        return {
            "views_a": np.stack([p.view_a.pixels for p in pairs])[:, None],
            "views_b": np.stack([p.view_b.pixels for p in pairs])[:, None],
            "overlap": [p.correspondence() for p in pairs],
            "shift": np.array([p.shift_frames for p in pairs]),
        }


def joint_step(
    model: LineModel,
    batch,
    config: JointConfig,
    device: Union[str, torch.device] = "cpu",
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Both views go through the same weights; embeddings are the head outputs."""
    views_a = torch.from_numpy(batch["views_a"]).to(device)
    views_b = torch.from_numpy(batch["views_b"]).to(device)
    out_a, out_b = model(views_a), model(views_b)

    if config.criterion is Criterion.VICREG:
        rows = np.concatenate([np.full(len(a), b) for b, (a, _) in enumerate(batch["overlap"])])
        idx_a = np.concatenate([a for a, _ in batch["overlap"]])
        idx_b = np.concatenate([b for _, b in batch["overlap"]])
        rows, idx_a, idx_b = (torch.from_numpy(v).to(out_a.device) for v in (rows, idx_a, idx_b))
        z_a = out_a[rows, idx_a]
        z_b = out_b[rows, idx_b]
        terms = vicreg_loss(
            z_a,
            z_b,
            config.invariance_weight,
            config.variance_weight,
            config.covariance_weight,
            config.gamma,
            config.eps,
        )
        loss = terms.total
        info = {
            "invariance": float(terms.invariance.detach()),
            "variance": float(terms.variance.detach()),
            "covariance": float(terms.covariance.detach()),
        }
    else:
        per_line = [
            ntxent_loss(out_a[b], out_b[b], overlap, config.temperature)
            for b, overlap in enumerate(batch["overlap"])
        ]
        loss = torch.stack(per_line).mean()
        z_a = out_a.reshape(-1, out_a.shape[-1])
        info = {"temperature": config.temperature}

    info["embedding_std"] = float(z_a.detach().std(dim=0).mean())
    return loss, info


def _probe_batch(probe_lines: Sequence[LineImage]) -> np.ndarray:
    if len(probe_lines) < 2:
        raise ValueError("the collapse probe needs at least 2 lines")
    width = min(line.width for line in probe_lines) // SUBSAMPLE_FACTOR * SUBSAMPLE_FACTOR
    if width < SUBSAMPLE_FACTOR:
        raise ValueError("probe lines are narrower than one frame")
    return np.stack([line.pixels[:, :width] for line in probe_lines])[:, None]


def collapse_probe(
    model: LineModel,
    probe_lines: Sequence[LineImage],
    device: Union[str, torch.device] = "cpu",
) -> float:
    """
    Mean cosine similarity between backbone outputs of different images at identical
    positions. Lines are cropped to the narrowest one; identical image pairs are skipped.
    A model that ignores its input and echoes position scores 1.
    """
    images = _probe_batch(probe_lines)
    pairs = [
        (i, j)
        for i in range(len(images))
        for j in range(i + 1, len(images))
        if not np.array_equal(images[i], images[j])
    ]
    if not pairs:
        raise ValueError("the collapse probe needs at least 2 distinct lines")
    with eval_mode(model):
        features, _ = model.backbone(torch.from_numpy(images).to(device))
        features = F.normalize(features.float(), dim=-1)
        left = torch.tensor([i for i, _ in pairs], device=features.device)
        right = torch.tensor([j for _, j in pairs], device=features.device)
        similarity = (features[left] * features[right]).sum(-1)
    return float(similarity.mean())


def train_joint(
    model: LineModel,
    corpus: Corpus,
    schedule: Schedule,
    config: Optional[JointConfig] = None,
    seed: int = 0,
    probe: Optional[Sequence[LineImage]] = None,
    augmentation: Optional[AugmentationSet] = None,
    metrics: Optional[MetricsStream] = None,
    checkpoint_dir: Optional[PathLike] = None,
    device: Union[str, torch.device] = "cpu",
    prefetch: bool = False,
    log_every: int = 50,
    progress: bool = True,
) -> Tuple[LineModel, TrainingLog]:
    config = config or JointConfig()
    if schedule.head is not None:
        replace_head(model, schedule.head, seed)
    model.to(device)
    augmentation = augmentation or AugmentationSet.for_kind(schedule.augmentation)
    builder = ViewPairBatchBuilder(corpus, config, augmentation, seed)
    stage = config.criterion.value

    def step(batch, iteration):
        model.train()
        loss, info = joint_step(model, batch, config, device)
        return StepOutput(loss, info)

    def evaluate(iteration):
        return {"collapse": collapse_probe(model, probe, device)}

    def on_stage_end(index, iteration):
        if checkpoint_dir is not None:
            save_checkpoint(
                Path(checkpoint_dir) / f"{stage}_stage{index + 1}.pt",
                model,
                {"phase": stage, "iteration": iteration},
            )

    result = run_schedule(
        schedule,
        model.parameters(),
        builder,
        step,
        stage=stage,
        metrics=metrics,
        evaluate=evaluate if probe else None,
        on_stage_end=on_stage_end,
        prefetch=prefetch,
        log_every=log_every,
        progress=progress,
    )
    return model, result


__all__ = [
    "EmptyOverlap",
    "ZeroNormEmbedding",
    "MaskSpec",
    "mask_slices",
    "MaskedBatchBuilder",
    "TopKReport",
    "label_ranks",
    "topk_error",
    "masked_cross_entropy",
    "masked_step",
    "masked_evaluate",
    "train_masked",
    "VICRegTerms",
    "vicreg_loss",
    "ntxent_loss",
    "default_crop_width",
    "JointConfig",
    "ViewPairBatchBuilder",
    "joint_step",
    "collapse_probe",
    "train_joint",
]
