"""
Diagnostic pictures: autoencoder reconstructions, nearest-neighbor retrieval over model
outputs, and image parts sharing a label trigram.

All panels are grayscale PNG strips; file names depend only on line order and ids.
"""

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ssltr.backbone import collate_images
from ssltr.dataset import BACKGROUND, Corpus, LineImage
from ssltr.errors import SsltrError
from ssltr.frames import frames_to_region
from ssltr.labelgen import AutoencoderModel, LabelManifest
from ssltr.training import eval_mode

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONTEXT_MARGIN = 16
DEFAULT_NEIGHBORS = 8
SEPARATOR = 2
SEPARATOR_VALUE = 0.5
TRIGRAM = 3


class TrigramOutOfBounds(SsltrError, ValueError):
    """The query position does not start a full label trigram."""


class NotEnoughFrames(SsltrError, ValueError):
    """More neighbors were requested than the search batch has frames."""


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def stack_rows(rows: Sequence[np.ndarray], separator: int = SEPARATOR) -> np.ndarray:
    """
    Stack 2-D strips vertically, right-padded with background to the widest one and
    divided by ``separator`` rows of mid-gray.

    >>> stack_rows([np.zeros((40, 10)), np.zeros((40, 6))]).shape
    (82, 10)
    """
    if not rows:
        raise ValueError("a panel needs at least one row")
    width = max(r.shape[1] for r in rows)
    parts = []
    for i, row in enumerate(rows):
        if i:
            parts.append(np.full((separator, width), SEPARATOR_VALUE, np.float32))
        padded = np.full((row.shape[0], width), BACKGROUND, np.float32)
        padded[:, : row.shape[1]] = row
        parts.append(padded)
    return np.concatenate(parts, axis=0)


def save_panel(rows: Sequence[np.ndarray], path: PathLike, separator: int = SEPARATOR) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(stack_rows(rows, separator))).save(path)
    return path


def _safe_name(line_id: str) -> str:
    """
    >>> _safe_name("page 3/line:7")
    'page_3_line_7'
    """
    return re.sub(r"[^A-Za-z0-9._-]+", "_", line_id)


def _lines(lines: Union[Corpus, Iterable[LineImage]]) -> List[LineImage]:
    if isinstance(lines, Corpus):
        return lines.images
    return list(lines)


# -- reconstructions --------------------------------------------------------------


def reconstruct(
    model: AutoencoderModel, image: LineImage, device: Union[str, torch.device] = "cpu"
) -> np.ndarray:
    with eval_mode(model):
        images, _ = collate_images([image], device)
        out = model(images).reconstruction
    return out[0, 0, :, : image.width].cpu().numpy().astype(np.float32)


def dump_reconstructions(
    model: AutoencoderModel,
    lines: Union[Corpus, Iterable[LineImage]],
    out_dir: PathLike,
    device: Union[str, torch.device] = "cpu",
) -> List[Path]:
    """One ``recon_<n>_<id>.png`` per line: the original above its reconstruction."""
    out_dir = Path(out_dir)
    paths = []
    for n, image in enumerate(_lines(lines)):
        rows = [image.pixels, reconstruct(model, image, device)]
        paths.append(save_panel(rows, out_dir / f"recon_{n:04d}_{_safe_name(image.id)}.png"))
    log.info("Wrote %d reconstruction panels to %s", len(paths), out_dir)
    return paths


# -- nearest neighbors ------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Frames ``[start, stop)`` of a line, cut out with context as pixels ``[x0, x1)``."""

    line_id: str
    start: int
    stop: int
    x0: int
    x1: int
    pixels: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def cut(cls, image: LineImage, start: int, stop: int, margin: int = CONTEXT_MARGIN):
        x0, x1 = frames_to_region(start, stop, margin, image.width)
        return cls(image.id, start, stop, x0, x1, image.pixels[:, x0:x1])


@dataclass
class RetrievalPanel:
    query: Region
    matches: List[Tuple[Region, float]]

    @property
    def similarities(self) -> List[float]:
        return [score for _, score in self.matches]

    def rows(self) -> List[np.ndarray]:
        return [self.query.pixels] + [region.pixels for region, _ in self.matches]

    def save(self, path: PathLike) -> Path:
        return save_panel(self.rows(), path, separator=SEPARATOR * 2)


OutputFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def frame_outputs(
    model: Union[torch.nn.Module, OutputFn],
    lines: Sequence[LineImage],
    device: Union[str, torch.device] = "cpu",
) -> List[np.ndarray]:
    """Per-line head outputs, each ``(frames, D)``; lines are run one at a time."""
    outputs = []
    context = eval_mode(model) if isinstance(model, torch.nn.Module) else torch.no_grad()
    with context:
        for image in lines:
            images, widths = collate_images([image], device)
            out = model(images, widths)
            outputs.append(out[0, : image.frames].double().cpu().numpy())
    return outputs


def nearest_neighbor_patches(
    model: Union[torch.nn.Module, OutputFn],
    batch_a: Sequence[LineImage],
    batch_b: Sequence[LineImage],
    n: int = DEFAULT_NEIGHBORS,
    seed: int = 0,
    margin: int = CONTEXT_MARGIN,
    device: Union[str, torch.device] = "cpu",
) -> List[RetrievalPanel]:
    """
    For one random frame of every line in ``batch_a``, the ``n`` frames of ``batch_b``
    with the most similar output (cosine). Ties keep ``batch_b`` order, except that a
    search of a batch against itself always returns the query frame first.
    """
    batch_a, batch_b = list(batch_a), list(batch_b)
    same = len(batch_a) == len(batch_b) and all(a is b for a, b in zip(batch_a, batch_b))
    outs_b = frame_outputs(model, batch_b, device)
    outs_a = outs_b if same else frame_outputs(model, batch_a, device)
    total = sum(len(o) for o in outs_b)
    if n > total:
        raise NotEnoughFrames(f"{n} neighbors requested, the search batch has {total} frames")

    owners = np.concatenate([np.full(len(o), i) for i, o in enumerate(outs_b)])
    frames = np.concatenate([np.arange(len(o)) for o in outs_b])
    offsets = np.cumsum([0] + [len(o) for o in outs_b])
    keys = F.normalize(torch.from_numpy(np.concatenate(outs_b)), dim=-1).numpy()
    positions = np.arange(total)

    rng = np.random.default_rng(seed)
    panels = []
    for i, (image, out) in enumerate(zip(batch_a, outs_a)):
        frame = int(rng.integers(len(out)))
        query = F.normalize(torch.from_numpy(out[frame]), dim=-1).numpy()
        scores = keys @ query
        if same:
            own = offsets[i] + frame
            scores[own] = max(scores[own], scores.max())
            order = np.lexsort((positions, positions != own, -scores))[:n]
        else:
            order = np.argsort(-scores, kind="stable")[:n]
        matches = [
            (
                Region.cut(batch_b[owners[j]], int(frames[j]), int(frames[j]) + 1, margin),
                float(scores[j]),
            )
            for j in order
        ]
        panels.append(RetrievalPanel(Region.cut(image, frame, frame + 1, margin), matches))
    return panels


def dump_neighbors(panels: Sequence[RetrievalPanel], out_dir: PathLike) -> List[Path]:
    out_dir = Path(out_dir)
    return [
        panel.save(out_dir / f"neighbors_{i:04d}_{_safe_name(panel.query.line_id)}.png")
        for i, panel in enumerate(panels)
    ]


# -- label trigrams ---------------------------------------------------------------

Trigram = Tuple[int, int, int]
Hit = Tuple[str, int]


def trigrams(labels: Sequence[int]) -> Iterable[Tuple[int, Trigram]]:
    """
    >>> list(trigrams([4, 5, 6, 7]))
    [(0, (4, 5, 6)), (1, (5, 6, 7))]
    """
    labels = [int(v) for v in labels]
    for pos in range(len(labels) - TRIGRAM + 1):
        yield pos, tuple(labels[pos : pos + TRIGRAM])


def brute_force_trigram_scan(
    manifest: LabelManifest, corpus: Corpus, trigram: Trigram
) -> List[Hit]:
    """Every ``(line_id, position)`` whose labels start ``trigram``, in corpus order."""
    trigram = tuple(int(v) for v in trigram)
    hits = []
    for line_id in corpus.ids:
        labels = manifest[line_id]
        for pos in range(len(labels) - TRIGRAM + 1):
            if tuple(int(v) for v in labels[pos : pos + TRIGRAM]) == trigram:
                hits.append((line_id, pos))
    return hits


class TrigramIndex(object):
    """Trigram to hit list, built once per corpus; hits are kept in corpus order."""

    def __init__(self, manifest: LabelManifest, corpus: Corpus):
        self.manifest = manifest
        self._hits: Dict[Trigram, List[Hit]] = defaultdict(list)
        for line_id in corpus.ids:
            for pos, trigram in trigrams(manifest[line_id]):
                self._hits[trigram].append((line_id, pos))

    def __len__(self) -> int:
        return len(self._hits)

    def lookup(self, trigram: Trigram) -> List[Hit]:
        return list(self._hits.get(tuple(int(v) for v in trigram), ()))


def query_trigram(manifest: LabelManifest, line_id: str, position: int) -> Trigram:
    labels = manifest[line_id]
    if not 0 <= position <= len(labels) - TRIGRAM:
        raise TrigramOutOfBounds(
            f"position {position} of line {line_id!r} ({len(labels)} labels) "
            f"does not start a trigram"
        )
    return tuple(int(v) for v in labels[position : position + TRIGRAM])


def trigram_matches(
    manifest: LabelManifest,
    corpus: Corpus,
    query_line: str,
    query_position: int,
    max_hits: Optional[int] = None,
    margin: int = CONTEXT_MARGIN,
    index: Optional[TrigramIndex] = None,
) -> List[Region]:
    """
    Image parts whose label trigram equals the one starting at ``query_position`` of
    ``query_line`` (the query itself included), as 24 px regions plus context.
    """
    manifest.check_alignment(corpus)
    if query_line not in manifest:
        raise KeyError(query_line)
    trigram = query_trigram(manifest, query_line, query_position)
    index = index or TrigramIndex(manifest, corpus)
    hits = index.lookup(trigram)
    if max_hits is not None:
        hits = hits[:max_hits]
    images = {entry.id: entry.image for entry in corpus}
    return [Region.cut(images[line_id], pos, pos + TRIGRAM, margin) for line_id, pos in hits]


def dump_trigram_matches(regions: Sequence[Region], path: PathLike) -> Path:
    if not regions:
        raise ValueError("no regions to draw")
    return save_panel([r.pixels for r in regions], path, separator=SEPARATOR * 2)


__all__ = [
    "CONTEXT_MARGIN",
    "DEFAULT_NEIGHBORS",
    "TrigramOutOfBounds",
    "NotEnoughFrames",
    "stack_rows",
    "save_panel",
    "reconstruct",
    "dump_reconstructions",
    "Region",
    "RetrievalPanel",
    "frame_outputs",
    "nearest_neighbor_patches",
    "dump_neighbors",
    "trigrams",
    "brute_force_trigram_scan",
    "TrigramIndex",
    "query_trigram",
    "trigram_matches",
    "dump_trigram_matches",
]
