import os

import numpy as np
import pytest
import torch

from ssltr.backbone import HeadSpec, LineModel, ModelConfig
from ssltr.dataset import LineImage
from ssltr.types import BackboneKind

slow = pytest.mark.skipif(
    not os.environ.get("SSLTR_SLOW_TESTS"),
    reason="set SSLTR_SLOW_TESTS=1 to run training-scale checks",
)


def tiny_config(backbone=BackboneKind.VIT, head="Linear(8)", **kwargs) -> ModelConfig:
    values = dict(
        backbone=backbone,
        dim=16,
        layers=1,
        heads=2,
        mlp_ratio=2,
        dropout=0.0,
        head=HeadSpec.parse(head),
        conv_width=0.0625,
    )
    values.update(kwargs)
    return ModelConfig(**values)


def tiny_model(backbone=BackboneKind.VIT, head="Linear(8)", seed=0, **kwargs) -> LineModel:
    torch.manual_seed(seed)
    return LineModel(tiny_config(backbone, head, **kwargs))


def random_line(width: int, seed: int = 0, line_id: str = "line") -> LineImage:
    rng = np.random.default_rng(seed)
    return LineImage(line_id, rng.random((40, width), dtype=np.float32))
