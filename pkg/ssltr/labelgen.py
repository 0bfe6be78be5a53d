"""
Discrete frame labels for masked pre-training.

Three sources are supported:

- Feature Quantization: k-means over frame features of an existing convolutional encoder.
- VQ-VAE: codeword indices of an autoencoder with a vector-quantized bottleneck.
- Post-quantized AE: k-means over the frame features of an unquantized autoencoder.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import MiniBatchKMeans, kmeans_plusplus
from torch import nn
from tqdm import tqdm

from ssltr import LINE_HEIGHT, SUBSAMPLE_FACTOR
from ssltr.augment import AugmentationSet
from ssltr.backbone import (
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    LineModel,
    checkpoint_digest,
    collate_images,
    load_checkpoint,
    pad_to_frames,
    read_payload,
    stack_lines,
    vgg_layers,
)
from ssltr.dataset import Corpus, batches_by_width
from ssltr.errors import DimensionMismatch, SsltrError
from ssltr.schedule import Schedule
from ssltr.training import MetricsStream, StepOutput, eval_mode, run_schedule
from ssltr.types import CodebookSource, LabelMethod, Style

log = logging.getLogger(__name__)

FEATURE_STORE_MAGIC = b"SSLTR-FEATURES 1\n"
FIT_SAMPLES_PER_CLUSTER = 100
KMEANS_CLASSES = 4096
COMMITMENT_WEIGHT = 0.25

PathLike = Union[str, Path]


class SubsampleMismatch(SsltrError, ValueError):
    """An encoder does not produce one frame per 8 pixels."""


class EmptyFeatureStore(SsltrError, ValueError):
    """A feature store holds no vectors."""


class KMeansError(SsltrError, ValueError):
    """k-means cannot be fitted with the requested cluster count."""


class EmptyCodebook(SsltrError, ValueError):
    """A vector quantizer was given a codebook without entries."""


class MissingAssets(SsltrError, ValueError):
    """A label-generation method was called without the models it needs."""


class LabelMisalignment(SsltrError, ValueError):
    """A line's label count differs from its frame count."""


def default_codebook_size(style) -> int:
    """
    >>> default_codebook_size("printed"), default_codebook_size("cursive")
    (1024, 2048)
    """
    return 2048 if Style(style) is Style.CURSIVE else 1024


def default_label_count(method, style) -> int:
    """
    Class count of a label method when none is configured: the VQ-VAE codebook size for
    ``vqvae``, ``KMEANS_CLASSES`` for the k-means methods.

    >>> default_label_count("fq", "printed"), default_label_count("pqae", "cursive")
    (4096, 4096)
    >>> default_label_count("vqvae", "cursive")
    2048
    """
    if LabelMethod(method) is LabelMethod.VQVAE:
        return default_codebook_size(style)
    return KMEANS_CLASSES


# -- feature store ----------------------------------------------------------------


class FeatureStore:
    """
    Per-line frame features. On disk: a magic line, then for every line a one-line JSON
    header ``{"id", "frames", "dim"}`` followed by ``frames * dim`` little-endian float32.
    """

    def __init__(self, features: Optional[Dict[str, np.ndarray]] = None):
        self._features: Dict[str, np.ndarray] = {}
        for line_id, f in (features or {}).items():
            self.add(line_id, f)

    def add(self, line_id: str, features: np.ndarray):
        features = np.ascontiguousarray(features, dtype=np.float32)
        if features.ndim != 2:
            raise ValueError(f"features of {line_id!r} must be 2-D, got {features.shape}")
        if self._features and features.shape[1] != self.dim:
            raise DimensionMismatch(
                f"features of {line_id!r} have dim {features.shape[1]}, store has {self.dim}"
            )
        self._features[line_id] = features

    def __len__(self) -> int:
        return len(self._features)

    def __getitem__(self, line_id: str) -> np.ndarray:
        return self._features[line_id]

    def __iter__(self):
        return iter(self._features.items())

    @property
    def ids(self) -> List[str]:
        return list(self._features)

    @property
    def dim(self) -> int:
        if not self._features:
            raise EmptyFeatureStore("an empty store has no dimension")
        return next(iter(self._features.values())).shape[1]

    @property
    def total_frames(self) -> int:
        return sum(f.shape[0] for f in self._features.values())

    def vectors(self) -> np.ndarray:
        if not self.total_frames:
            raise EmptyFeatureStore("feature store holds no vectors")
        return np.concatenate(list(self._features.values()), axis=0)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(FEATURE_STORE_MAGIC)
            for line_id, feats in self._features.items():
                header = {"id": line_id, "frames": feats.shape[0], "dim": feats.shape[1]}
                f.write(json.dumps(header).encode("utf8") + b"\n")
                f.write(feats.astype("<f4").tobytes())
        return path

    @classmethod
    def load(cls, path: PathLike) -> "FeatureStore":
        store = cls()
        with open(path, "rb") as f:
            if f.readline() != FEATURE_STORE_MAGIC:
                raise ValueError(f"{path} is not a feature store")
            while True:
                line = f.readline()
                if not line:
                    break
                header = json.loads(line)
                count = header["frames"] * header["dim"]
                data = np.frombuffer(f.read(4 * count), dtype="<f4")
                if data.size != count:
                    raise ValueError(f"{path}: truncated block for {header['id']!r}")
                store.add(header["id"], data.reshape(header["frames"], header["dim"]))
        return store


def _frame_encoder(encoder: nn.Module) -> nn.Module:
    if isinstance(encoder, (LineModel, AutoencoderModel)):
        return encoder.encoder
    return encoder


def extract_features(
    encoder: nn.Module,
    corpus: Corpus,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
    progress: bool = True,
) -> FeatureStore:
    """
    Run a frame encoder over every line. Accepts a bare encoder module, a ``LineModel``
    (its frame encoder is used) or an ``AutoencoderModel`` (its unquantized encoder).
    """
    encoder = _frame_encoder(encoder)
    factor = getattr(encoder, "subsample_factor", None)
    if factor != SUBSAMPLE_FACTOR:
        raise SubsampleMismatch(
            f"encoder subsamples by {factor}, labels need {SUBSAMPLE_FACTOR}"
        )
    features: List[Optional[np.ndarray]] = [None] * len(corpus)
    groups = list(batches_by_width(corpus, batch_size))
    with eval_mode(encoder):
        for group in tqdm(groups, desc="features", disable=not progress, leave=False):
            images, _ = collate_images([corpus[i].image for i in group], device)
            out = encoder(images).float().cpu().numpy()
            for row, i in enumerate(group):
                frames = corpus[i].image.frames
                if out.shape[1] != frames:
                    raise SubsampleMismatch(
                        f"encoder produced {out.shape[1]} frames for line "
                        f"{corpus[i].id!r}, expected {frames}"
                    )
                features[i] = out[row]
    return FeatureStore({corpus[i].id: f for i, f in enumerate(features)})


def sample_fit_set(
    store: Union[FeatureStore, np.ndarray],
    k: int,
    seed: int = 0,
    per_cluster: int = FIT_SAMPLES_PER_CLUSTER,
) -> np.ndarray:
    """Uniform sample of ``k * per_cluster`` vectors without replacement."""
    vectors = store.vectors() if isinstance(store, FeatureStore) else np.asarray(store)
    if len(vectors) == 0:
        raise EmptyFeatureStore("cannot sample from an empty feature store")
    wanted = k * per_cluster
    if len(vectors) <= wanted:
        if len(vectors) < wanted:
            log.warning(
                "Feature store holds %d vectors, fewer than %d; using all of them",
                len(vectors),
                wanted,
            )
        return vectors
    rng = np.random.default_rng(seed)
    return vectors[np.sort(rng.choice(len(vectors), wanted, replace=False))]


# -- k-means ----------------------------------------------------------------------


@dataclass
class Codebook:
    centroids: np.ndarray
    source: CodebookSource = CodebookSource.KMEANS
    inertia: Optional[float] = None
    normalize: bool = False

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        self.source = CodebookSource(self.source)
        if self.centroids.ndim != 2:
            raise ValueError(f"centroids must be k x D, got {self.centroids.shape}")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(
                f,
                centroids=self.centroids,
                source=self.source.value,
                inertia=np.nan if self.inertia is None else self.inertia,
                normalize=self.normalize,
            )
        return path

    @classmethod
    def load(cls, path: PathLike) -> "Codebook":
        with np.load(path) as data:
            inertia = float(data["inertia"])
            return cls(
                data["centroids"],
                str(data["source"]),
                None if np.isnan(inertia) else inertia,
                bool(data["normalize"]),
            )


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def nearest_centroid(
    features: np.ndarray, centroids: np.ndarray, chunk_elements: int = 1 << 24
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Index of and squared distance to the nearest centroid; ties go to the lowest index.

    >>> labels, dist = nearest_centroid(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0], [2.0, 0.0]]))
    >>> labels.tolist(), dist.tolist()
    ([0], [1.0])
    """
    features = np.asarray(features)
    centroids = np.asarray(centroids)
    if features.ndim != 2 or centroids.ndim != 2 or features.shape[1] != centroids.shape[1]:
        raise DimensionMismatch(
            f"features {features.shape} and centroids {centroids.shape} do not share a dim"
        )
    n, k = len(features), len(centroids)
    step = max(1, chunk_elements // max(1, k * features.shape[1]))
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for start in range(0, n, step):
        diff = features[start : start + step, None, :].astype(np.float64) - centroids[None]
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        idx = sq.argmin(axis=1)
        labels[start : start + step] = idx
        dist[start : start + step] = sq[np.arange(len(idx)), idx]
    return labels, dist


def _reseed_empty(
    x: np.ndarray, centers: np.ndarray, labels: np.ndarray, dist: np.ndarray
) -> int:
    """Move every empty cluster to the farthest point of the currently largest cluster."""
    k = len(centers)
    moved = 0
    for j in np.flatnonzero(np.bincount(labels, minlength=k) == 0):
        sizes = np.bincount(labels, minlength=k)
        members = np.flatnonzero(labels == int(np.argmax(sizes)))
        far = members[np.argmax(dist[members])]
        if dist[far] <= 0.0:
            break
        centers[j] = x[far]
        labels[far] = j
        dist[far] = 0.0
        moved += 1
    return moved


def _check_fit_args(x: np.ndarray, k: int):
    if x.ndim != 2 or len(x) == 0:
        raise EmptyFeatureStore("k-means needs a non-empty 2-D sample")
    if not 1 <= k <= len(x):
        raise KMeansError(f"cannot fit {k} clusters to {len(x)} vectors")
    distinct = len(np.unique(x, axis=0))
    if distinct < k:
        raise KMeansError(f"sample has only {distinct} distinct vectors, need {k}")


def fit_kmeans(
    sample: np.ndarray,
    k: int,
    epochs: int = 100,
    batch_size: int = 16384,
    seed: int = 0,
    normalize: bool = False,
) -> Codebook:
    """
    Mini-batch k-means with k-means++ seeding, run for ``epochs`` passes over the sample.
    Clusters still empty at the end are moved onto the farthest points of the largest ones.
    """
    x = np.asarray(sample, dtype=np.float64)
    if normalize:
        x = _l2_normalize(x)
    _check_fit_args(x, k)
    kmeans = MiniBatchKMeans(
        n_clusters=k,
        init="k-means++",
        batch_size=min(batch_size, len(x)),
        max_iter=epochs,
        max_no_improvement=None,
        n_init=1,
        random_state=seed,
    ).fit(x)
    log.debug("k-means stopped after %d steps", kmeans.n_steps_)
    centers = kmeans.cluster_centers_.astype(np.float64)

    labels, dist = nearest_centroid(x, centers)
    for _ in range(k):
        if not _reseed_empty(x, centers, labels, dist):
            break
        labels, dist = nearest_centroid(x, centers)
    inertia = float(dist.sum())
    log.info("k-means: k=%d, %d vectors, inertia %.6g", k, len(x), inertia)
    return Codebook(centers, CodebookSource.KMEANS, inertia, normalize)


def lloyd(
    sample: np.ndarray, k: int, iterations: int = 20, seed: int = 0
) -> Tuple[Codebook, List[float]]:
    """Full-batch k-means; returns the codebook and the inertia before every update."""
    x = np.asarray(sample, dtype=np.float64)
    _check_fit_args(x, k)
    centers, _ = kmeans_plusplus(x, k, random_state=seed)
    history: List[float] = []
    for _ in range(iterations):
        labels, dist = nearest_centroid(x, centers)
        history.append(float(dist.sum()))
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        hits = np.bincount(labels, minlength=k)
        active = hits > 0
        centers[active] = sums[active] / hits[active, None]
    _, dist = nearest_centroid(x, centers)
    return Codebook(centers, CodebookSource.KMEANS, float(dist.sum())), history


def assign_labels(codebook: Codebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid label of every feature row (lowest index on ties)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != codebook.dim:
        raise DimensionMismatch(
            f"features of shape {features.shape} do not match codebook dim {codebook.dim}"
        )
    if codebook.normalize:
        features = _l2_normalize(features)
    labels, _ = nearest_centroid(features, codebook.centroids)
    return labels


def fit_codebook(
    encoder: nn.Module,
    corpus: Corpus,
    k: int,
    seed: int = 0,
    epochs: int = 100,
    batch_size: int = 16384,
    normalize: bool = False,
    device: Union[str, torch.device] = "cpu",
    progress: bool = True,
) -> Codebook:
    store = extract_features(encoder, corpus, device=device, progress=progress)
    sample = sample_fit_set(store, k, seed)
    return fit_kmeans(sample, k, epochs, batch_size, seed, normalize)


# -- autoencoders -----------------------------------------------------------------


AE_CHANNELS = (32, 32, "M", 64, 64, "M", 128, 128, "M", 128, 128)


@dataclass
class AEConfig:
    latent_dim: int = 64
    width: float = 1.0
    quantized: bool = False
    codebook_size: int = 1024
    commitment: float = COMMITMENT_WEIGHT


def nearest_codeword(latent: torch.Tensor, codebook: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Index of the nearest codeword for every row of ``latent``; lowest index on ties."""
    with torch.no_grad():
        out = []
        for start in range(0, latent.shape[0], chunk):
            diff = latent[start : start + chunk, None, :] - codebook[None]
            out.append((diff * diff).sum(-1).argmin(dim=1))
        if not out:
            return torch.zeros(0, dtype=torch.long, device=latent.device)
        return torch.cat(out)


def vq_quantize(latent: torch.Tensor, codebook: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Substitute every latent row by its nearest codeword. The returned tensor carries the
    straight-through gradient: its gradient flows to ``latent`` unchanged.
    """
    if codebook.dim() != 2 or codebook.shape[0] == 0:
        raise EmptyCodebook("vector quantization needs at least one codeword")
    if latent.shape[-1] != codebook.shape[1]:
        raise DimensionMismatch(
            f"latent dim {latent.shape[-1]} does not match codebook dim {codebook.shape[1]}"
        )
    flat = latent.reshape(-1, latent.shape[-1])
    index = nearest_codeword(flat.detach(), codebook.detach())
    quantized = codebook[index].reshape(latent.shape)
    return latent + (quantized - latent).detach(), index.reshape(latent.shape[:-1])


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size: int, dim: int, commitment: float = COMMITMENT_WEIGHT):
        super().__init__()
        self.commitment = commitment
        self.embedding = nn.Embedding(codebook_size, dim)
        nn.init.uniform_(self.embedding.weight, -1.0 / codebook_size, 1.0 / codebook_size)
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def init_from(self, latents: torch.Tensor, seed: int = 0):
        """Draw codewords uniformly within one standard deviation of the latent mean."""
        latents = latents.reshape(-1, latents.shape[-1]).float()
        mean, std = latents.mean(0), latents.std(0, unbiased=False)
        generator = torch.Generator().manual_seed(seed)
        u = torch.rand(self.embedding.weight.shape, generator=generator)
        weight = (mean.cpu() - std.cpu()) + 2 * std.cpu() * u
        self.embedding.weight.copy_(weight.to(self.embedding.weight))
        self.initialized.fill_(True)

    def forward(self, z: torch.Tensor):
        z_st, index = vq_quantize(z, self.embedding.weight)
        z_q = self.embedding.weight[index]
        codebook_loss = F.mse_loss(z_q, z.detach())
        commitment_loss = F.mse_loss(z, z_q.detach())
        return z_st, index, codebook_loss, commitment_loss


class AEEncoder(nn.Module):
    """8 conv layers with ReLU and three 2x2 max pools; one latent vector per frame."""

    subsample_factor = SUBSAMPLE_FACTOR

    def __init__(self, config: AEConfig):
        super().__init__()
        self.features, channels = vgg_layers(AE_CHANNELS, config.width, batch_norm=False)
        self.channels = channels
        self.proj = nn.Linear(channels * (LINE_HEIGHT // SUBSAMPLE_FACTOR), config.latent_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.features(pad_to_frames(images))
        b, c, h, w = x.shape
        return self.proj(x.permute(0, 3, 1, 2).reshape(b, w, c * h))


class AEDecoder(nn.Module):
    """Mirror of ``AEEncoder`` with upsampling in place of pooling; sigmoid output."""

    def __init__(self, config: AEConfig, channels: int):
        super().__init__()
        self.channels = channels
        self.rows = LINE_HEIGHT // SUBSAMPLE_FACTOR
        self.proj = nn.Linear(config.latent_dim, channels * self.rows)
        layers: List[nn.Module] = []
        plan = list(reversed(AE_CHANNELS))
        for i, item in enumerate(plan):
            if item == "M":
                layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
                continue
            last = i == len(plan) - 1
            out = 1 if last else max(4, int(round(int(item) * config.width)))
            layers.append(nn.Conv2d(channels, out, 3, padding=1))
            if not last:
                layers.append(nn.ReLU(inplace=True))
            channels = out
        self.layers = nn.Sequential(*layers)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        b, length, _ = latent.shape
        x = self.proj(latent).reshape(b, length, self.channels, self.rows)
        x = x.permute(0, 2, 3, 1)
        return torch.sigmoid(self.layers(x))


@dataclass
class AEOutput:
    reconstruction: torch.Tensor
    latent: torch.Tensor
    indices: Optional[torch.Tensor] = None
    codebook_loss: Optional[torch.Tensor] = None
    commitment_loss: Optional[torch.Tensor] = None


class AutoencoderModel(nn.Module):
    subsample_factor = SUBSAMPLE_FACTOR

    def __init__(self, config: AEConfig):
        super().__init__()
        self.config = config
        self.encoder = AEEncoder(config)
        self.quantizer = (
            VectorQuantizer(config.codebook_size, config.latent_dim, config.commitment)
            if config.quantized
            else None
        )
        self.decoder = AEDecoder(config, self.encoder.channels)

    @property
    def quantized(self) -> bool:
        return self.quantizer is not None

    def forward(self, images: torch.Tensor) -> AEOutput:
        latent = self.encoder(images)
        if self.quantizer is None:
            out = AEOutput(self.decoder(latent), latent)
        else:
            z_st, index, codebook_loss, commitment_loss = self.quantizer(latent)
            out = AEOutput(self.decoder(z_st), latent, index, codebook_loss, commitment_loss)
        out.reconstruction = out.reconstruction[..., : images.shape[-1]]
        return out


def masked_mse(reconstruction: torch.Tensor, target: torch.Tensor, widths: torch.Tensor):
    """Mean squared error over the pixels inside every line's own width."""
    columns = torch.arange(target.shape[-1], device=target.device)
    mask = (columns[None, :] < widths[:, None]).to(target.dtype)[:, None, None, :]
    count = mask.sum() * target.shape[2]
    return (((reconstruction - target) ** 2) * mask).sum() / count


def ae_loss(model: AutoencoderModel, images: torch.Tensor, widths: torch.Tensor):
    out = model(images)
    mse = masked_mse(out.reconstruction, images, widths)
    metrics = {"mse": float(mse.detach())}
    loss = mse
    if out.codebook_loss is not None:
        loss = loss + out.codebook_loss + model.config.commitment * out.commitment_loss
        metrics["codebook"] = float(out.codebook_loss.detach())
        metrics["commitment"] = float(out.commitment_loss.detach())
    return loss, metrics


@dataclass
class ReconstructionBatchBuilder:
    """Picklable batch source for autoencoder training; pure in ``(seed, iteration)``."""

    corpus: Corpus
    augmentation: AugmentationSet = field(default_factory=AugmentationSet.visual)
    seed: int = 0
    max_width: Optional[int] = None

    def __call__(self, iteration: int, batch_size: int):
        rng = np.random.default_rng([self.seed, iteration])
        picks = rng.choice(len(self.corpus), batch_size, replace=len(self.corpus) < batch_size)
        lines = []
        for i in picks:
            image = self.corpus[int(i)].image
            if self.max_width is not None and image.width > self.max_width:
                frames = self.max_width // SUBSAMPLE_FACTOR
                start = int(rng.integers(0, image.frames - frames + 1)) * SUBSAMPLE_FACTOR
                image = image.with_pixels(image.pixels[:, start : start + self.max_width])
            lines.append(self.augmentation.apply(image, int(rng.integers(2**31))))
        return stack_lines(lines)


def reconstruction_mse(
    model: AutoencoderModel,
    corpus: Corpus,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
) -> float:
    """Held-out reconstruction error, averaged over all valid pixels of the corpus."""
    total, count = 0.0, 0
    with eval_mode(model):
        for group in batches_by_width(corpus, batch_size):
            images, widths = collate_images([corpus[i].image for i in group], device)
            out = model(images)
            pixels = int(widths.sum()) * LINE_HEIGHT
            total += float(masked_mse(out.reconstruction, images, widths)) * pixels
            count += pixels
    return total / count


def codebook_usage(
    model: AutoencoderModel,
    corpus: Corpus,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
) -> np.ndarray:
    """Histogram of codeword use over all frames of ``corpus``."""
    if not model.quantized:
        raise ValueError("codebook usage needs a quantized autoencoder")
    labels = vq_labels(model, corpus, batch_size, device)
    hist = np.zeros(model.config.codebook_size, dtype=np.int64)
    for seq in labels.values():
        hist += np.bincount(seq, minlength=model.config.codebook_size)
    return hist


def vq_labels(
    model: AutoencoderModel,
    corpus: Corpus,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
) -> Dict[str, np.ndarray]:
    result: Dict[str, np.ndarray] = {}
    with eval_mode(model):
        for group in batches_by_width(corpus, batch_size):
            images, _ = collate_images([corpus[i].image for i in group], device)
            indices = model(images).indices.cpu().numpy()
            for row, i in enumerate(group):
                result[corpus[i].id] = indices[row, : corpus[i].image.frames].astype(np.int64)
    return {line_id: result[line_id] for line_id in corpus.ids}


def train_autoencoder(
    corpus: Corpus,
    quantized: bool,
    codebook_size: Optional[int],
    schedule: Schedule,
    config: Optional[AEConfig] = None,
    seed: int = 0,
    heldout: Optional[Corpus] = None,
    metrics: Optional[MetricsStream] = None,
    checkpoint_dir: Optional[PathLike] = None,
    max_width: Optional[int] = None,
    augmentation: Optional[AugmentationSet] = None,
    device: Union[str, torch.device] = "cpu",
    log_every: int = 50,
    progress: bool = True,
) -> AutoencoderModel:
    """
    Train an AE (``quantized=False``) or VQ-VAE with masked reconstruction MSE. A VQ-VAE
    codebook is initialized from encoder outputs over one pass of the corpus.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train an autoencoder on an empty corpus")
    config = config or AEConfig()
    config = AEConfig(
        config.latent_dim,
        config.width,
        quantized,
        codebook_size or config.codebook_size,
        config.commitment,
    )
    torch.manual_seed(seed)
    model = AutoencoderModel(config).to(device)

    if model.quantizer is not None:
        latents = []
        with eval_mode(model):
            for group in batches_by_width(corpus, 16):
                images, _ = collate_images([corpus[i].image for i in group], device)
                latent = model.encoder(images)
                for row, i in enumerate(group):
                    latents.append(latent[row, : corpus[i].image.frames])
        model.quantizer.init_from(torch.cat(latents), seed)

    augmentation = augmentation or AugmentationSet.for_kind(schedule.augmentation)
    builder = ReconstructionBatchBuilder(corpus, augmentation, seed, max_width)
    stage = "vqvae" if quantized else "ae"

    def step(batch, iteration):
        model.train()
        images = torch.from_numpy(batch[0]).to(device)
        widths = torch.from_numpy(batch[1]).to(device)
        loss, info = ae_loss(model, images, widths)
        return StepOutput(loss, info)

    def evaluate(iteration):
        return {"heldout_mse": reconstruction_mse(model, heldout, device=device)}

    def on_stage_end(index, iteration):
        if checkpoint_dir is not None:
            save_autoencoder(Path(checkpoint_dir) / f"{stage}_stage{index + 1}.pt", model)

    run_schedule(
        schedule,
        model.parameters(),
        builder,
        step,
        stage=stage,
        metrics=metrics,
        evaluate=evaluate if heldout is not None and len(heldout) else None,
        on_stage_end=on_stage_end,
        log_every=log_every,
        progress=progress,
    )
    model.eval()
    return model


def save_autoencoder(path: PathLike, model: AutoencoderModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": "autoencoder",
            "config": asdict(model.config),
            "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        },
        path,
    )
    return path


def load_autoencoder(path: PathLike, device: Union[str, torch.device] = "cpu") -> AutoencoderModel:
    payload = read_payload(path, "autoencoder")
    model = AutoencoderModel(AEConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.to(device).eval()


# -- label manifests --------------------------------------------------------------


@dataclass
class LabelSequence:
    line_id: str
    labels: np.ndarray


@dataclass
class LabelManifest:
    """
    Frame labels per line. On disk: ``id<TAB>space-separated labels`` lines plus a
    ``<name>.meta.json`` sidecar with the class count, method and encoder digest.
    """

    k: int
    method: LabelMethod
    labels: Dict[str, np.ndarray] = field(default_factory=dict)
    encoder_digest: Optional[str] = None

    def __post_init__(self):
        self.method = LabelMethod(self.method)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, line_id: str) -> np.ndarray:
        return self.labels[line_id]

    def __contains__(self, line_id: str) -> bool:
        return line_id in self.labels

    @property
    def ids(self) -> List[str]:
        return list(self.labels)

    def sequences(self) -> Iterator[LabelSequence]:
        for line_id, labels in self.labels.items():
            yield LabelSequence(line_id, labels)

    @staticmethod
    def meta_path(path: PathLike) -> Path:
        path = Path(path)
        return path.with_name(path.name + ".meta.json")

    def meta(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "method": self.method.value,
            "encoder_digest": self.encoder_digest,
            "lines": len(self.labels),
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf8") as f:
            for line_id, labels in self.labels.items():
                f.write(f"{line_id}\t{' '.join(str(int(v)) for v in labels)}\n")
        with open(self.meta_path(path), "w", encoding="utf8") as f:
            json.dump(self.meta(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: PathLike) -> "LabelManifest":
        with open(cls.meta_path(path), encoding="utf8") as f:
            meta = json.load(f)
        labels: Dict[str, np.ndarray] = {}
        with open(path, encoding="utf8") as f:
            for number, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                line_id, _, values = line.partition("\t")
                labels[line_id] = np.array(values.split(), dtype=np.int64)
                if labels[line_id].size and labels[line_id].max() >= meta["k"]:
                    raise ValueError(f"{path}:{number}: label outside [0, {meta['k']})")
        return cls(meta["k"], meta["method"], labels, meta.get("encoder_digest"))

    def check_alignment(self, corpus: Corpus):
        for entry in corpus:
            if entry.id not in self.labels:
                raise LabelMisalignment(f"line {entry.id!r} has no labels")
            found = len(self.labels[entry.id])
            if found != entry.image.frames:
                raise LabelMisalignment(
                    f"line {entry.id!r} has {found} labels for {entry.image.frames} frames"
                )


@dataclass
class LabelAssets:
    """Models a label-generation method draws on."""

    encoder: Optional[nn.Module] = None
    codebook: Optional[Codebook] = None
    autoencoder: Optional[AutoencoderModel] = None
    encoder_digest: Optional[str] = None

    @classmethod
    def from_files(
        cls,
        encoder: Optional[PathLike] = None,
        codebook: Optional[PathLike] = None,
        autoencoder: Optional[PathLike] = None,
    ) -> "LabelAssets":
        assets = cls()
        if encoder is not None:
            assets.encoder = load_checkpoint(encoder)[0]
            assets.encoder_digest = checkpoint_digest(encoder)
        if autoencoder is not None:
            assets.autoencoder = load_autoencoder(autoencoder)
            assets.encoder_digest = checkpoint_digest(autoencoder)
        if codebook is not None:
            assets.codebook = Codebook.load(codebook)
        return assets


def _require(method: LabelMethod, **assets):
    missing = [name for name, value in assets.items() if value is None]
    if missing:
        raise MissingAssets(f"{method.value} labels need {', '.join(missing)}")


def _quantize_store(codebook: Codebook, store: FeatureStore) -> Dict[str, np.ndarray]:
    if codebook.k < 2:
        raise KMeansError(f"label generation needs a codebook with k >= 2, got {codebook.k}")
    return {line_id: assign_labels(codebook, feats) for line_id, feats in store}


def generate_labels(
    method,
    corpus: Corpus,
    assets: LabelAssets,
    out_path: Optional[PathLike] = None,
    batch_size: int = 16,
    device: Union[str, torch.device] = "cpu",
    progress: bool = True,
) -> LabelManifest:
    method = LabelMethod(method)
    if method is LabelMethod.FQ:
        _require(method, encoder=assets.encoder, codebook=assets.codebook)
        store = extract_features(assets.encoder, corpus, batch_size, device, progress)
        labels, k = _quantize_store(assets.codebook, store), assets.codebook.k
    elif method is LabelMethod.PQAE:
        _require(method, autoencoder=assets.autoencoder, codebook=assets.codebook)
        store = extract_features(assets.autoencoder.encoder, corpus, batch_size, device, progress)
        labels, k = _quantize_store(assets.codebook, store), assets.codebook.k
    else:
        _require(method, autoencoder=assets.autoencoder)
        if not assets.autoencoder.quantized:
            raise MissingAssets("vqvae labels need a quantized autoencoder")
        labels = vq_labels(assets.autoencoder, corpus, batch_size, device)
        k = assets.autoencoder.config.codebook_size

    manifest = LabelManifest(k, method, labels, assets.encoder_digest)
    manifest.check_alignment(corpus)
    if out_path is not None:
        manifest.save(out_path)
        log.info("Wrote %d label sequences (k=%d) to %s", len(manifest), k, out_path)
    return manifest


__all__ = [
    "SubsampleMismatch",
    "EmptyFeatureStore",
    "KMeansError",
    "EmptyCodebook",
    "MissingAssets",
    "LabelMisalignment",
    "KMEANS_CLASSES",
    "default_codebook_size",
    "default_label_count",
    "FeatureStore",
    "extract_features",
    "sample_fit_set",
    "Codebook",
    "nearest_centroid",
    "fit_kmeans",
    "lloyd",
    "assign_labels",
    "fit_codebook",
    "AEConfig",
    "nearest_codeword",
    "vq_quantize",
    "VectorQuantizer",
    "AutoencoderModel",
    "masked_mse",
    "ReconstructionBatchBuilder",
    "reconstruction_mse",
    "codebook_usage",
    "vq_labels",
    "train_autoencoder",
    "save_autoencoder",
    "load_autoencoder",
    "LabelSequence",
    "LabelManifest",
    "LabelAssets",
    "generate_labels",
]
