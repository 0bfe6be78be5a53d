from enum import Enum


class Style(str, Enum):
    """Bundled synthetic rendering styles."""

    PRINTED = "printed"
    "Regular glyph rendering with mild noise"

    CURSIVE = "cursive"
    "Slanted, jittered and thickened strokes"


class AugKind(str, Enum):
    """Augmentation sets."""

    NONE = "none"

    VISUAL = "visual"
    "Colour/intensity change, noise, gamma, motion and defocus blur"

    ALL = "all"
    "Visual plus geometry (skew, scale) and rectangular masking"


class BackboneKind(str, Enum):
    """Frame encoders placed in front of the Transformer."""

    VIT = "vit"
    "Linear projection of 40x8 slices"

    VGGT = "vggt"
    "VGG-style convolutional encoder"


class HeadKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


class CodebookSource(str, Enum):
    KMEANS = "kmeans"
    VQVAE = "vqvae"


class LabelMethod(str, Enum):
    """Label generators for masked label prediction."""

    FQ = "fq"
    "k-means over features of an external frame encoder"

    VQVAE = "vqvae"
    "Codeword indices of a trained VQ-VAE"

    PQAE = "pqae"
    "k-means over features of a trained, unquantized autoencoder"


class Criterion(str, Enum):
    """Joint-embedding criteria."""

    VICREG = "vicreg"
    "Non-contrastive, computed over the entire batch"

    NTXENT = "ntxent"
    "Contrastive, computed separately within each line"


class Phase(str, Enum):
    """Rows of the training-setup table."""

    MASKED = "masked"
    AE = "ae"
    VICREG = "vicreg"
    NTXENT = "ntxent"
    OCR_SCRATCH = "ocr_scratch"
    OCR_FINETUNE = "ocr_finetune"


class Method(str, Enum):
    """Experiment methods compared on the fine-tuning budgets."""

    SCRATCH = "scratch"
    TRANSFER = "transfer"
    FQ = "fq"
    VQVAE = "vqvae"
    PQAE = "pqae"
    VICREG = "vicreg"
    NTXENT = "ntxent"

    @property
    def label_method(self) -> "LabelMethod":
        return LabelMethod(self.value)

    @property
    def is_masked(self) -> bool:
        return self in (Method.FQ, Method.VQVAE, Method.PQAE)

    @property
    def is_joint(self) -> bool:
        return self in (Method.VICREG, Method.NTXENT)


__all__ = [
    "Style",
    "AugKind",
    "BackboneKind",
    "HeadKind",
    "CodebookSource",
    "LabelMethod",
    "Criterion",
    "Phase",
    "Method",
]
