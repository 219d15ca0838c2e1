"""Multi-scale aggregation and nearest-class-token decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

DIST_EPS = 1e-12
CLASS_TOKEN_SCALE = 1.0


@dataclass
class SegPrediction:
    probs: Tensor  # K×H×W
    distances: Tensor | None = None  # K×H×W, decoder resolution only
    coarse: "SegPrediction | None" = None

    def labels(self) -> np.ndarray:
        return np.argmax(self.probs.data, axis=0)


def init_class_tokens(k: int, width: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    if k < 2:
        raise ContractError(f"need at least 2 classes, got {k}")
    return Tensor((CLASS_TOKEN_SCALE * rng.standard_normal((k, width))).astype(dtype), requires_grad=True)


def aggregate_multiscale(stage_maps: Sequence[Tensor], height: int, width: int) -> Tensor:
    """Upsample every stage map to height×width and stack along channels."""
    if len(stage_maps) < 4:
        raise ContractError(f"expected 4 stage maps, got {len(stage_maps)}")
    return T.concat([T.upsample_bilinear(T.as_tensor(s), height, width) for s in stage_maps], axis=0)


def class_distance(xf: Tensor, class_tokens: Tensor) -> Tensor:
    """Euclidean distance of every pixel feature to every class token -> K×H×W."""
    c, h, w = xf.shape
    if class_tokens.data.ndim != 2 or class_tokens.shape[1] != c:
        raise DimensionError(f"class_distance: class tokens {class_tokens.shape} vs feature width {c}")
    pixels = T.transpose(T.reshape(xf, (c, h * w)))
    d = T.pairwise_distance(class_tokens, pixels, eps=DIST_EPS)
    return T.reshape(d, (class_tokens.shape[0], h, w))


def predict(dists: Tensor) -> SegPrediction:
    """Class probabilities as a softmax of negated distances over the class axis."""
    return SegPrediction(softmax_classes(T.scale(dists, -1.0)), dists)


def softmax_classes(logits: Tensor) -> Tensor:
    """Softmax over the class axis of a K×H×W map."""
    k, h, w = logits.shape
    flat = T.transpose(T.reshape(logits, (k, h * w)))
    return T.reshape(T.transpose(T.softmax_rows(flat)), (k, h, w))
