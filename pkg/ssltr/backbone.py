"""
Sequence models over text lines: a frame encoder (ViT patch embedding or VggT conv
encoder) producing one frame per 8 pixels, a pre-norm Transformer encoder with sinusoidal
positional encoding, and a swappable per-frame head.
"""

import hashlib
import logging
import pickle
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ssltr import LINE_HEIGHT, SUBSAMPLE_FACTOR
from ssltr.dataset import BACKGROUND, LineImage
from ssltr.errors import DimensionMismatch, SsltrError
from ssltr.frames import padded_width
from ssltr.types import BackboneKind, HeadKind

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ssltr-checkpoint"
CHECKPOINT_VERSION = 1

VGG_CHANNELS = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512)


class ShapeError(SsltrError, ValueError):
    """An image does not have the normalized line height."""


class HeadMismatch(SsltrError, ValueError):
    """A head's output size does not match what its consumer expects."""


class CheckpointError(SsltrError):
    """A checkpoint file is not a readable ssltr checkpoint."""


@dataclass
class HeadSpec:
    """
    Per-frame output head, written in table notation.

    >>> HeadSpec.parse("MLP(3, 2048)")
    HeadSpec(kind=<HeadKind.MLP: 'mlp'>, output_size=2048, mlp_layers=3, mlp_width=2048)
    >>> str(HeadSpec.parse("Linear(512)"))
    'Linear(512)'
    """

    kind: HeadKind = HeadKind.LINEAR
    output_size: int = 512
    mlp_layers: int = 3
    mlp_width: int = 2048

    def __post_init__(self):
        self.kind = HeadKind(self.kind)
        if self.output_size < 1:
            raise ValueError("head output size must be at least 1")
        if self.kind is HeadKind.MLP and self.mlp_layers < 2:
            raise ValueError("an MLP head needs at least 2 layers")

    @classmethod
    def linear(cls, output_size: int) -> "HeadSpec":
        return cls(HeadKind.LINEAR, output_size)

    @classmethod
    def mlp(cls, layers: int, width: int) -> "HeadSpec":
        return cls(HeadKind.MLP, width, layers, width)

    @classmethod
    def parse(cls, text: str) -> "HeadSpec":
        m = re.fullmatch(r"\s*(linear|mlp)\s*\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\)\s*", text, re.I)
        if not m:
            raise ValueError(f"cannot parse head spec {text!r}")
        kind, a, b = m.group(1).lower(), int(m.group(2)), m.group(3)
        if kind == "linear":
            if b is not None:
                raise ValueError(f"Linear takes one argument: {text!r}")
            return cls.linear(a)
        if b is None:
            raise ValueError(f"MLP takes (layers, width): {text!r}")
        return cls.mlp(a, int(b))

    def __str__(self) -> str:
        if self.kind is HeadKind.LINEAR:
            return f"Linear({self.output_size})"
        return f"MLP({self.mlp_layers}, {self.mlp_width})"


@dataclass
class ModelConfig:
    backbone: BackboneKind = BackboneKind.VGGT
    dim: int = 512
    layers: int = 6
    heads: int = 8
    mlp_ratio: int = 4
    dropout: float = 0.1
    head: HeadSpec = field(default_factory=HeadSpec)
    positional_encoding: bool = True
    conv_width: float = 1.0
    "Multiplier on the VGG channel plan; small values give desk-sized encoders"

    def __post_init__(self):
        self.backbone = BackboneKind(self.backbone)
        if isinstance(self.head, str):
            self.head = HeadSpec.parse(self.head)
        elif isinstance(self.head, dict):
            self.head = HeadSpec(**self.head)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dim % 2:
            raise ValueError("dim must be even for the sinusoidal positional encoding")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["backbone"] = self.backbone.value
        d["head"]["kind"] = self.head.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["head"] = HeadSpec(**d["head"]) if isinstance(d.get("head"), dict) else d.get("head", HeadSpec())
        return cls(**d)


def _check_height(images: torch.Tensor):
    if images.dim() != 4 or images.shape[1] != 1 or images.shape[2] != LINE_HEIGHT:
        raise ShapeError(
            f"expected images of shape (B, 1, {LINE_HEIGHT}, W), got {tuple(images.shape)}"
        )


def pad_to_frames(images: torch.Tensor) -> torch.Tensor:
    extra = padded_width(images.shape[-1]) - images.shape[-1]
    if extra:
        images = F.pad(images, (0, extra), value=BACKGROUND)
    return images


class PatchEmbedding(nn.Module):
    """Linear projection of each 40x8 slice; slices are embedded independently."""

    subsample_factor = SUBSAMPLE_FACTOR

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(LINE_HEIGHT * SUBSAMPLE_FACTOR, dim)

    @property
    def out_dim(self) -> int:
        return self.dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _check_height(images)
        x = pad_to_frames(images)
        b, _, h, w = x.shape
        slices = x.reshape(b, h, w // SUBSAMPLE_FACTOR, SUBSAMPLE_FACTOR)
        slices = slices.permute(0, 2, 1, 3).reshape(b, w // SUBSAMPLE_FACTOR, h * SUBSAMPLE_FACTOR)
        return self.proj(slices)


def patch_embed(embedding: PatchEmbedding, images: torch.Tensor) -> torch.Tensor:
    return embedding(images)


def vgg_layers(plan: Sequence[Union[int, str]], width: float, batch_norm: bool = True):
    layers: List[nn.Module] = []
    channels = 1
    for item in plan:
        if item == "M":
            layers.append(nn.MaxPool2d(2, 2))
            continue
        out = max(4, int(round(int(item) * width)))
        layers.append(nn.Conv2d(channels, out, 3, padding=1))
        if batch_norm:
            layers.append(nn.BatchNorm2d(out))
        layers.append(nn.ReLU(inplace=True))
        channels = out
    return nn.Sequential(*layers), channels


class ConvEncoder(nn.Module):
    """
    VGG-style encoder: 10 conv layers with batch norm and ReLU, three 2x2 max pools
    (40x8 pixels -> 5x1), then the 5 remaining rows are flattened into channels and
    projected to ``dim``.
    """

    subsample_factor = SUBSAMPLE_FACTOR

    def __init__(self, dim: int, width: float = 1.0):
        super().__init__()
        self.dim = dim
        self.features, channels = vgg_layers(VGG_CHANNELS, width)
        self.proj = nn.Linear(channels * (LINE_HEIGHT // SUBSAMPLE_FACTOR), dim)

    @property
    def out_dim(self) -> int:
        return self.dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _check_height(images)
        x = self.features(pad_to_frames(images))
        b, c, h, w = x.shape
        x = x.permute(0, 3, 1, 2).reshape(b, w, c * h)
        return self.proj(x)


def conv_encode(encoder: ConvEncoder, images: torch.Tensor) -> torch.Tensor:
    return encoder(images)


def positional_encoding(length: int, dim: int) -> torch.Tensor:
    """
    Sinusoidal absolute positional encoding, base 10000.

    >>> pe = positional_encoding(2, 4)
    >>> pe[0].tolist()
    [0.0, 1.0, 0.0, 1.0]
    >>> round(float(pe[1, 0]), 6)
    0.841471
    """
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    if length < 1:
        raise ValueError("positional encoding needs length >= 1")
    position = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.pow(10000.0, torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.empty(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position / div)
    pe[:, 1::2] = torch.cos(position / div)
    return pe.to(torch.get_default_dtype())


class LineTransformer(nn.Module):
    """Pre-norm Transformer encoder; adds the positional encoding once to its input."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.dim = config.dim
        self.use_positional_encoding = config.positional_encoding
        layer = nn.TransformerEncoderLayer(
            config.dim,
            config.heads,
            dim_feedforward=config.dim * config.mlp_ratio,
            dropout=config.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, config.layers, enable_nested_tensor=False
        )
        self.norm = nn.LayerNorm(config.dim)

    def forward(
        self, frames: torch.Tensor, padding_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        if frames.shape[-1] != self.dim:
            raise DimensionMismatch(
                f"transformer expects dim {self.dim}, got {frames.shape[-1]}"
            )
        if self.use_positional_encoding:
            pe = positional_encoding(frames.shape[1], self.dim)
            frames = frames + pe.to(device=frames.device, dtype=frames.dtype)
        return self.norm(self.encoder(frames, src_key_padding_mask=padding_mask))


def transformer_forward(
    transformer: LineTransformer,
    frames: torch.Tensor,
    padding_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    return transformer(frames, padding_mask)


def build_head(spec: HeadSpec, dim: int) -> nn.Module:
    if spec.kind is HeadKind.LINEAR:
        return nn.Linear(dim, spec.output_size)
    layers: List[nn.Module] = []
    width = dim
    for _ in range(spec.mlp_layers - 1):
        layers += [nn.Linear(width, spec.mlp_width), nn.LayerNorm(spec.mlp_width), nn.ReLU()]
        width = spec.mlp_width
    layers.append(nn.Linear(width, spec.output_size))
    return nn.Sequential(*layers)


def head_output_size(head: nn.Module) -> int:
    last = head if isinstance(head, nn.Linear) else head[-1]
    return last.out_features


def head_forward(
    features: torch.Tensor, head: nn.Module, expected_size: Optional[int] = None
) -> torch.Tensor:
    """Apply ``head`` to every frame; ``expected_size`` is the consumer's class count."""
    if expected_size is not None and head_output_size(head) != expected_size:
        raise HeadMismatch(
            f"head produces {head_output_size(head)} outputs, consumer expects {expected_size}"
        )
    return head(features)


def _init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def frame_padding_mask(widths: torch.Tensor, length: int) -> torch.Tensor:
    """True where a frame lies beyond a line's own width."""
    frames = torch.div(widths + SUBSAMPLE_FACTOR - 1, SUBSAMPLE_FACTOR, rounding_mode="floor")
    return torch.arange(length, device=widths.device)[None, :] >= frames[:, None]


class LineModel(nn.Module):
    """Frame encoder + Transformer + head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone is BackboneKind.VIT:
            self.encoder = PatchEmbedding(config.dim)
        else:
            self.encoder = ConvEncoder(config.dim, config.conv_width)
        self.transformer = LineTransformer(config)
        self.head = build_head(config.head, config.dim)
        self.apply(_init_weights)

    @property
    def output_size(self) -> int:
        return head_output_size(self.head)

    def backbone(
        self, images: torch.Tensor, widths: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Backbone features ``(B, L, dim)`` and the frame padding mask."""
        frames = self.encoder(images)
        mask = None
        if widths is not None:
            mask = frame_padding_mask(widths.to(frames.device), frames.shape[1])
        return self.transformer(frames, mask), mask

    def forward(
        self,
        images: torch.Tensor,
        widths: Optional[torch.Tensor] = None,
        return_features: bool = False,
    ):
        features, mask = self.backbone(images, widths)
        out = self.head(features)
        if return_features:
            return out, features, mask
        return out

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("head.")]


def replace_head(
    model: LineModel, spec: HeadSpec, seed: Optional[int] = None
) -> LineModel:
    """Install a freshly initialized head; backbone parameters are left untouched."""
    with torch.random.fork_rng(devices=[], enabled=seed is not None):
        if seed is not None:
            torch.manual_seed(seed)
        head = build_head(spec, model.config.dim)
        head.apply(_init_weights)
    param = next(model.parameters())
    model.head = head.to(device=param.device, dtype=param.dtype)
    model.config = replace(model.config, head=spec)
    log.debug("Replaced head with %s", spec)
    return model


def stack_lines(
    images: Sequence[Union[LineImage, np.ndarray]]
) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad lines to a common frame-aligned width; returns ``(B, 1, 40, W)`` and widths."""
    arrays = [im.pixels if isinstance(im, LineImage) else im for im in images]
    if not arrays:
        raise ValueError("cannot stack an empty list of lines")
    width = padded_width(max(a.shape[1] for a in arrays))
    batch = np.full((len(arrays), 1, LINE_HEIGHT, width), BACKGROUND, np.float32)
    for i, a in enumerate(arrays):
        if a.shape[0] != LINE_HEIGHT:
            raise ShapeError(f"line {i} has height {a.shape[0]}, expected {LINE_HEIGHT}")
        batch[i, 0, :, : a.shape[1]] = a
    return batch, np.array([a.shape[1] for a in arrays], dtype=np.int64)


def collate_images(
    images: Sequence[Union[LineImage, np.ndarray]], device: Union[str, torch.device] = "cpu"
) -> Tuple[torch.Tensor, torch.Tensor]:
    batch, widths = stack_lines(images)
    return torch.from_numpy(batch).to(device), torch.from_numpy(widths).to(device)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(
    path: Union[str, Path], model: LineModel, extra: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "line_model",
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    log.debug("Saved checkpoint %s", path)
    return path


def _torch_load(path: Union[str, Path]):
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except TypeError:
        # torch < 2.0 has no weights_only
        return torch.load(path, map_location="cpu")


def read_payload(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    try:
        payload = _torch_load(path)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an ssltr checkpoint")
    if kind is not None and payload.get("kind", "line_model") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')}, expected a {kind}")
    return payload


def load_checkpoint(
    path: Union[str, Path], device: Union[str, torch.device] = "cpu"
) -> Tuple[LineModel, Dict[str, Any]]:
    """Rebuild the model from its config echo; returns ``(model, extra)``."""
    payload = read_payload(path, "line_model")
    model = LineModel(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.to(device), payload.get("extra", {})


def load_encoder_weights(model: LineModel, path: Union[str, Path]) -> LineModel:
    """
    Initialize the frame encoder from a local file: an ssltr checkpoint or a plain
    state dict whose keys match ``model.encoder``.
    """
    try:
        payload = read_payload(path)
        state = {
            k[len("encoder."):]: v
            for k, v in payload["state_dict"].items()
            if k.startswith("encoder.")
        }
    except CheckpointError:
        state = _torch_load(path)
    missing, unexpected = model.encoder.load_state_dict(state, strict=False)
    if missing:
        log.warning("Encoder weights from %s miss %d tensors", path, len(missing))
    if unexpected:
        log.warning("Ignored %d unexpected tensors from %s", len(unexpected), path)
    return model


def state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode("utf8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def checkpoint_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def describe(model: LineModel) -> str:
    c = model.config
    lines = [
        f"backbone:   {c.backbone.value} (dim {c.dim}, {c.layers} layers, {c.heads} heads, "
        f"mlp ratio {c.mlp_ratio})",
        f"positional: {'sinusoidal' if c.positional_encoding else 'none'}",
        f"head:       {c.head}",
        f"parameters: encoder {parameter_count(model.encoder):,}, "
        f"transformer {parameter_count(model.transformer):,}, "
        f"head {parameter_count(model.head):,}, total {parameter_count(model):,}",
    ]
    return "\n".join(lines)


__all__ = [
    "ShapeError",
    "HeadMismatch",
    "CheckpointError",
    "HeadSpec",
    "ModelConfig",
    "PatchEmbedding",
    "patch_embed",
    "ConvEncoder",
    "conv_encode",
    "positional_encoding",
    "LineTransformer",
    "transformer_forward",
    "build_head",
    "head_forward",
    "head_output_size",
    "LineModel",
    "replace_head",
    "stack_lines",
    "collate_images",
    "frame_padding_mask",
    "pad_to_frames",
    "save_checkpoint",
    "load_checkpoint",
    "read_payload",
    "load_encoder_weights",
    "state_digest",
    "checkpoint_digest",
    "parameter_count",
    "describe",
]
