"""
Text-line corpora: synthetic rendering, manifest I/O, height normalization and the nested
fine-tuning subsets.

Manifest format (UTF-8, LF line endings), one record per line::

    id<TAB>relative_image_path[<TAB>transcription]

Images are 8-bit grayscale PNGs; RGB images are converted through luminance.
"""

import logging
import math
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from ssltr import LINE_HEIGHT, SUBSAMPLE_FACTOR
from ssltr.errors import SsltrError
from ssltr.frames import frame_count
from ssltr.types import Style

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
BACKGROUND = 1.0

PathLike = Union[str, Path]


class ManifestError(SsltrError, ValueError):
    """A manifest record is malformed or references a missing image."""


class DuplicateLineId(SsltrError, ValueError):
    """Two corpus entries share an id."""


class UnknownStyle(SsltrError, ValueError):
    """The rendering style is not one of the bundled styles."""


class UnsupportedCharacter(SsltrError, ValueError):
    """The text contains a character the rendering style cannot draw."""


class ZeroAreaImage(SsltrError, ValueError):
    """An image has zero height or zero width."""


class SubsetTooLarge(SsltrError, ValueError):
    """More entries were requested than the corpus holds."""


class UnknownCharacter(SsltrError, ValueError):
    """A character is not part of the charset."""


@dataclass(frozen=True)
class LineImage:
    """A single-channel text-line raster with intensities in [0, 1] (1 is background)."""

    id: str
    pixels: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def frames(self) -> int:
        return frame_count(self.width)

    def with_pixels(self, pixels: np.ndarray) -> "LineImage":
        return LineImage(self.id, np.ascontiguousarray(pixels, dtype=np.float32))

    def is_normalized(self) -> bool:
        return (
            self.height == LINE_HEIGHT
            and self.width >= SUBSAMPLE_FACTOR
            and float(self.pixels.min()) >= 0.0
            and float(self.pixels.max()) <= 1.0
        )


@dataclass(frozen=True)
class Charset:
    """
    Ordered unique symbols; the blank is always the last class.

    ``capacity`` reserves a fixed number of character classes (padding classes never
    decode to a character).

    >>> cs = Charset.from_texts(["ba", "ab c"])
    >>> cs.symbols, cs.blank_index
    ((' ', 'a', 'b', 'c'), 4)
    >>> cs.decode(cs.encode("cab"))
    'cab'
    """

    symbols: Tuple[str, ...]
    capacity: Optional[int] = None

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("charset symbols must be unique")
        if any(len(s) != 1 for s in self.symbols):
            raise ValueError("charset symbols must be single characters")
        if self.capacity is not None and self.capacity < len(self.symbols):
            raise ValueError(
                f"capacity {self.capacity} is smaller than {len(self.symbols)} symbols"
            )

    @classmethod
    def from_texts(cls, texts: Iterable[str], capacity: Optional[int] = None):
        symbols = sorted({ch for text in texts for ch in text})
        return cls(tuple(symbols), capacity)

    @property
    def num_classes(self) -> int:
        return (self.capacity or len(self.symbols)) + 1

    @property
    def blank_index(self) -> int:
        return self.num_classes - 1

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    @property
    def _index(self):
        return _symbol_index(self.symbols)

    def encode(self, text: str) -> Tuple[int, ...]:
        try:
            return tuple(self._index[ch] for ch in text)
        except KeyError as e:
            raise UnknownCharacter(f"{e.args[0]!r} is not in the charset") from None

    def decode(self, indices: Iterable[int]) -> str:
        chars = []
        for i in indices:
            i = int(i)
            if not 0 <= i < len(self.symbols):
                raise UnknownCharacter(f"index {i} does not map to a character")
            chars.append(self.symbols[i])
        return "".join(chars)

    def with_capacity(self, capacity: Optional[int]) -> "Charset":
        return Charset(self.symbols, capacity)


@lru_cache(maxsize=64)
def _symbol_index(symbols: Tuple[str, ...]):
    return {ch: i for i, ch in enumerate(symbols)}


@dataclass(frozen=True)
class Transcription:
    text: str
    indices: Tuple[int, ...]

    @classmethod
    def from_text(cls, text: str, charset: Charset) -> "Transcription":
        return cls(text, charset.encode(text))


@dataclass(frozen=True)
class Entry:
    image: LineImage
    transcription: Optional[Transcription] = None

    @property
    def id(self) -> str:
        return self.image.id

    @property
    def text(self) -> Optional[str]:
        return None if self.transcription is None else self.transcription.text


@dataclass(frozen=True)
class Corpus:
    """An immutable, ordered collection of line images with optional transcriptions."""

    name: str
    charset: Charset
    entries: Tuple[Entry, ...]

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.id in seen:
                raise DuplicateLineId(f"duplicate id {entry.id!r} in corpus {self.name!r}")
            seen.add(entry.id)
            if entry.transcription is not None:
                missing = set(entry.transcription.text) - set(self.charset.symbols)
                if missing:
                    raise UnknownCharacter(
                        f"line {entry.id!r} uses characters outside the charset: "
                        f"{''.join(sorted(missing))!r}"
                    )

    @classmethod
    def from_lines(
        cls,
        name: str,
        lines: Sequence[Tuple[LineImage, Optional[str]]],
        charset: Optional[Charset] = None,
    ) -> "Corpus":
        if charset is None:
            charset = Charset.from_texts(t for _, t in lines if t is not None)
        entries = tuple(
            Entry(image, None if text is None else Transcription.from_text(text, charset))
            for image, text in lines
        )
        return cls(name, charset, entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Entry]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> Entry:
        return self.entries[index]

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self.entries]

    @property
    def images(self) -> List[LineImage]:
        return [e.image for e in self.entries]

    def is_annotated(self) -> bool:
        return all(e.transcription is not None for e in self.entries)

    def get(self, line_id: str) -> Entry:
        for entry in self.entries:
            if entry.id == line_id:
                return entry
        raise KeyError(line_id)

    def take(self, indices: Sequence[int], name: Optional[str] = None) -> "Corpus":
        return Corpus(
            name or self.name, self.charset, tuple(self.entries[i] for i in indices)
        )

    def with_charset(self, charset: Charset) -> "Corpus":
        entries = tuple(
            Entry(e.image, None if e.text is None else Transcription.from_text(e.text, charset))
            for e in self.entries
        )
        return Corpus(self.name, charset, entries)


# -- rendering --------------------------------------------------------------------


@dataclass(frozen=True)
class RenderStyle:
    """A bundled style name plus the strength of additive pixel noise."""

    name: Style = Style.PRINTED
    noise: float = 0.02

    @classmethod
    def parse(cls, value: Union["RenderStyle", Style, str], noise: float = 0.02):
        if isinstance(value, RenderStyle):
            return value
        try:
            return cls(Style(value), noise)
        except ValueError:
            raise UnknownStyle(f"unknown style {value!r}") from None


STYLE_ALPHABETS = {
    Style.PRINTED: frozenset(
        string.ascii_letters + string.digits + string.punctuation + " "
    ),
    Style.CURSIVE: frozenset(string.ascii_letters + string.digits + " .,'-"),
}

# cursive-like strokes: horizontal shear and per-glyph vertical jitter (native pixels)
CURSIVE_SHEAR = 0.35
CURSIVE_JITTER = 1
RENDER_PAD = 2
GLYPH_PROBE = string.ascii_letters + string.digits + "|()[]{}"


@lru_cache(maxsize=1)
def _font():
    return ImageFont.load_default()


def render_synthetic_line(
    text: str, style: Union[RenderStyle, Style, str] = Style.PRINTED, seed: int = 0
) -> LineImage:
    """Render ``text`` as a normalized line image; deterministic for fixed arguments."""
    if not text:
        raise ValueError("cannot render empty text")
    style = RenderStyle.parse(style)
    unsupported = sorted(set(text) - STYLE_ALPHABETS[style.name])
    if unsupported:
        raise UnsupportedCharacter(
            f"style {style.name.value!r} cannot render {''.join(unsupported)!r}"
        )
    rng = np.random.default_rng(seed)
    font = _font()
    _, _, _, bottom = font.getbbox(GLYPH_PROBE)
    cursive = style.name is Style.CURSIVE
    jitter = CURSIVE_JITTER if cursive else 0
    height = int(bottom) + 2 * (RENDER_PAD + jitter)
    advances = [font.getlength(ch) for ch in text]
    slant_room = int(math.ceil(CURSIVE_SHEAR * height)) if cursive else 0
    width = int(math.ceil(sum(advances))) + 2 * RENDER_PAD + slant_room

    canvas = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(canvas)
    x = float(RENDER_PAD)
    for ch, advance in zip(text, advances):
        dy = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
        draw.text((x, RENDER_PAD + jitter + dy), ch, font=font, fill=0)
        x += advance
    if cursive:
        # x_in = x_out + shear * y_out - shear * height: top leans right
        canvas = canvas.transform(
            canvas.size,
            Image.Transform.AFFINE,
            (1.0, CURSIVE_SHEAR, -CURSIVE_SHEAR * height, 0.0, 1.0, 0.0),
            resample=Image.Resampling.BILINEAR,
            fillcolor=255,
        )
        canvas = canvas.filter(ImageFilter.MinFilter(3))

    pixels = np.asarray(canvas, dtype=np.float32) / 255.0
    image = normalize_height(LineImage(f"synth-{seed}", pixels))
    if style.noise > 0:
        noisy = image.pixels + rng.normal(0.0, style.noise, image.pixels.shape)
        image = image.with_pixels(np.clip(noisy, 0.0, 1.0))
    return image


# bundled vocabulary for synthetic lines
WORDS = (
    "the of and to in is was for on that with as by at from his her they which this "
    "be are had not have one all were their there been when who will more no out "
    "so said what up its about into than them can only other new some could time "
    "these two may then first any like now my such make over our even most after "
    "letter house river court year church paper market street answer morning small"
).split()


def random_text(rng: np.random.Generator, min_words: int = 2, max_words: int = 6) -> str:
    count = int(rng.integers(min_words, max_words + 1))
    words = [WORDS[int(i)] for i in rng.integers(0, len(WORDS), count)]
    if rng.random() < 0.3:
        words[0] = words[0].capitalize()
    text = " ".join(words)
    if rng.random() < 0.3:
        text += "."
    return text


def synth_corpus(
    name: str,
    style: Union[RenderStyle, Style, str],
    lines: int,
    seed: int = 0,
    charset: Optional[Charset] = None,
) -> Corpus:
    """Render ``lines`` random vocabulary lines; ids are ``<name>-<index>``."""
    style = RenderStyle.parse(style)
    rng = np.random.default_rng(seed)
    rendered = []
    for i in range(lines):
        text = random_text(rng)
        image = render_synthetic_line(text, style, seed=int(rng.integers(2**31)))
        rendered.append((LineImage(f"{name}-{i:06d}", image.pixels), text))
    return Corpus.from_lines(name, rendered, charset)


# -- normalization ----------------------------------------------------------------


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def normalize_height(image: LineImage) -> LineImage:
    """
    Scale to height 40 preserving the aspect ratio (width rounded, minimum 8).

    >>> img = LineImage("x", np.ones((60, 100), np.float32))
    >>> normalize_height(img).pixels.shape
    (40, 67)
    """
    h, w = image.pixels.shape[:2]
    if h == 0 or w == 0:
        raise ZeroAreaImage(f"line {image.id!r} has zero area ({h}x{w})")
    new_w = max(SUBSAMPLE_FACTOR, _round_half_up(w * LINE_HEIGHT / h))
    if h == LINE_HEIGHT and w == new_w:
        return image.with_pixels(np.clip(image.pixels, 0.0, 1.0))
    resized = Image.fromarray(np.asarray(image.pixels, dtype=np.float32)).resize(
        (new_w, LINE_HEIGHT), Image.Resampling.BILINEAR
    )
    return image.with_pixels(np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0))


def pad_width(pixels: np.ndarray, width: int, value: float = BACKGROUND) -> np.ndarray:
    """Right-pad a raster to ``width`` columns."""
    extra = width - pixels.shape[1]
    if extra <= 0:
        return pixels
    return np.pad(pixels, ((0, 0), (0, extra)), constant_values=value)


# -- manifests --------------------------------------------------------------------


def _read_image(path: Path, line_id: str) -> LineImage:
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return normalize_height(LineImage(line_id, pixels))


def load_manifest(path: PathLike, name: Optional[str] = None, workers: int = 1) -> Corpus:
    """Load a manifest; image paths are relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    records = []
    seen = {}
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
                raise ManifestError(f"{path}:{number}: malformed record {line!r}")
            line_id, rel = fields[0], fields[1]
            if line_id in seen:
                raise DuplicateLineId(
                    f"{path}:{number}: duplicate id {line_id!r} (first on line {seen[line_id]})"
                )
            seen[line_id] = number
            image_path = base / rel
            if not image_path.is_file():
                raise ManifestError(
                    f"{path}:{number}: record {line_id!r} references missing image {rel!r}"
                )
            text = fields[2] if len(fields) == 3 and fields[2] else None
            records.append((line_id, image_path, text))
    log.debug("Read %d records from %s", len(records), path)

    def load(record):
        line_id, image_path, _ = record
        return _read_image(image_path, line_id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(load, records))
    else:
        images = [load(r) for r in records]
    lines = [(image, text) for image, (_, _, text) in zip(images, records)]
    return Corpus.from_lines(name or path.parent.name, lines)


def write_manifest(corpus: Corpus, out_dir: PathLike, manifest_name: str = MANIFEST_NAME) -> Path:
    """Write PNGs under ``out_dir/images`` and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, entry in enumerate(corpus):
        if any(c in entry.id for c in "\t\n"):
            raise ManifestError(f"line id {entry.id!r} contains a tab or newline")
        rel = f"images/{i:06d}.png"
        pixels = np.round(np.clip(entry.image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(out_dir / rel)
        row = [entry.id, rel]
        if entry.text is not None:
            row.append(entry.text)
        rows.append("\t".join(row) + "\n")
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(rows)
    log.info("Wrote %d lines to %s", len(rows), manifest)
    return manifest


# -- subsets ----------------------------------------------------------------------


def _permutation(size: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(size)


def subset(corpus: Corpus, n: int, seed: int = 0) -> Corpus:
    """
    Deterministic ``n``-entry sample; smaller subsets of the same seed are nested in
    larger ones (prefixes of one seeded shuffle). Entries keep corpus order.
    """
    if n < 0:
        raise ValueError("subset size must be non-negative")
    if n > len(corpus):
        raise SubsetTooLarge(f"requested {n} lines from a corpus of {len(corpus)}")
    chosen = np.sort(_permutation(len(corpus), seed)[:n])
    return corpus.take(chosen.tolist(), name=f"{corpus.name}[{n}]")


def split(corpus: Corpus, n_heldout: int, seed: int = 0) -> Tuple[Corpus, Corpus]:
    """Split off ``n_heldout`` entries; the remainder keeps the corpus name."""
    if n_heldout > len(corpus):
        raise SubsetTooLarge(f"requested {n_heldout} held-out lines from {len(corpus)}")
    order = _permutation(len(corpus), seed)
    heldout = np.sort(order[:n_heldout]).tolist()
    rest = np.sort(order[n_heldout:]).tolist()
    return corpus.take(rest), corpus.take(heldout, name=f"{corpus.name}-heldout")


def batches_by_width(corpus: Corpus, batch_size: int) -> Iterator[List[int]]:
    """Group line indices with equal padded width, so no line sees foreign padding."""
    frames = [entry.image.frames for entry in corpus]
    group: List[int] = []
    for i in sorted(range(len(corpus)), key=lambda i: (frames[i], i)):
        if group and (len(group) == batch_size or frames[group[0]] != frames[i]):
            yield group
            group = []
        group.append(i)
    if group:
        yield group


__all__ = [
    "ManifestError",
    "DuplicateLineId",
    "UnknownStyle",
    "UnsupportedCharacter",
    "ZeroAreaImage",
    "SubsetTooLarge",
    "UnknownCharacter",
    "LineImage",
    "Charset",
    "Transcription",
    "Entry",
    "Corpus",
    "RenderStyle",
    "render_synthetic_line",
    "synth_corpus",
    "normalize_height",
    "pad_width",
    "load_manifest",
    "write_manifest",
    "subset",
    "split",
    "batches_by_width",
]
