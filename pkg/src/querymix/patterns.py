"""Shared base patterns and content-conditioned convex query composition.

A :class:`WeightGenerator` turns multi-scale feature maps into a row-stochastic
``n x m`` weight matrix; :func:`compose_queries` mixes the ``m`` rows of a
:class:`PatternBank` into ``n`` content queries with those weights.

Desk-scale stand-ins: the 1x1 convolution is a per-position linear map, the
dilated convolution is a depthwise rate-2 3x3 stencil, and the channel/spatial
attention blocks are learnable sigmoid gates of the same arity.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Tensor

log = logging.getLogger(__name__)

MIN_PATTERN_NORM = 1e-8
STENCIL_MIN_EXTENT = 5


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return _param(rng.normal(0.0, std, size=shape))


class PatternBank(Module):
    """``m x d`` learnable base patterns."""

    def __init__(self, m: int, d: int, rng: np.random.Generator | None = None, data=None):
        if data is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            data = rng.normal(0.0, 1.0 / np.sqrt(d), size=(m, d))
        self.patterns = _param(np.array(data, dtype=np.float64))
        if self.patterns.shape != (m, d):
            raise ValueError(f"pattern data has shape {self.patterns.shape}, expected {(m, d)}")
        self.enforce_nonzero()

    @property
    def m(self) -> int:
        return self.patterns.shape[0]

    @property
    def d(self) -> int:
        return self.patterns.shape[1]

    def enforce_nonzero(self) -> None:
        """Reset any (near-)zero row to a scaled basis vector."""
        norms = np.linalg.norm(self.patterns.data, axis=1)
        for i in np.flatnonzero(norms < MIN_PATTERN_NORM):
            row = np.zeros(self.d)
            row[i % self.d] = 1.0 / np.sqrt(self.d)
            self.patterns.data[i] = row


@dataclass
class DynamicWeights:
    W: Tensor  # n x m, rows on the probability simplex

    @property
    def matrix(self) -> np.ndarray:
        return self.W.data

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[1]


class ScaleTransform(Module):
    """Per-position linear map, rate-2 depthwise stencil, ReLU."""

    def __init__(self, d: int, rng: np.random.Generator, stencil: bool = True):
        self.linear = _normal(rng, (d, d), 1.0 / np.sqrt(d))
        # drawn even when unused so later parameters initialize the same either way
        taps = rng.normal(0.0, 0.1, size=(9, d))
        taps[4] = 1.0  # centre tap: starts close to the identity stencil
        self.taps = _param(taps) if stencil else None
        self.bias = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ValueError(f"feature map must be h x w x d, got {x.shape}")
        h, w, d = x.shape
        y = dc.reshape(dc.reshape(x, (h * w, d)) @ self.linear, (h, w, d))
        if self.taps is not None and h >= STENCIL_MIN_EXTENT and w >= STENCIL_MIN_EXTENT:
            y = dc.dilated_stencil(y, self.taps, rate=2)
        return dc.relu(y + self.bias)


def scale_transform(module: ScaleTransform, feature_map: Tensor) -> Tensor:
    return module(feature_map)


class TopDownFusion(Module):
    """Upsample-and-add fusion refined by channel and spatial sigmoid gates."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.channel_logit = _param(np.zeros(d))
        self.spatial_proj = _normal(rng, (d, 1), 1.0 / np.sqrt(d))
        self.spatial_bias = _param(np.zeros(1))

    def __call__(self, high: Tensor, low: Tensor) -> Tensor:
        h, w, d = high.shape
        if low.shape != (2 * h, 2 * w, d):
            raise ValueError(f"low map must be {(2 * h, 2 * w, d)}, got {low.shape}")
        fused = dc.nearest_upsample2x(high) + low
        channel_gate = dc.sigmoid(self.channel_logit)
        flat = dc.reshape(fused, (4 * h * w, d))
        spatial_gate = dc.reshape(dc.sigmoid(flat @ self.spatial_proj + self.spatial_bias), (2 * h, 2 * w, 1))
        return fused * channel_gate * spatial_gate + low


def top_down_fuse(module: TopDownFusion, high: Tensor, low: Tensor) -> Tensor:
    return module(high, low)


class WeightGenerator(Module):
    """Maps coarse-to-fine feature maps to an ``n x m`` row-stochastic matrix."""

    def __init__(self, d: int, n: int, m: int, n_scales: int = 2, hidden: int | None = None,
                 rng: np.random.Generator | None = None, extents: list[int] | None = None):
        """``extents`` (spatial size per scale, if known) lets scales too small
        for the stencil skip its parameters entirely."""
        if n_scales < 2:
            raise ValueError("the weight generator needs at least two scales")
        if extents is not None and len(extents) != n_scales:
            raise ValueError("need one extent per scale")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden or d
        self.d, self.n, self.m = d, n, m
        extents = extents or [STENCIL_MIN_EXTENT] * n_scales
        self.transforms = [ScaleTransform(d, rng, stencil=e >= STENCIL_MIN_EXTENT) for e in extents]
        self.fusions = [TopDownFusion(d, rng) for _ in range(n_scales - 1)]
        self.w1 = _normal(rng, (d, hidden), 1.0 / np.sqrt(d))
        self.b1 = _param(np.zeros(hidden))
        self.norm_gain = _param(np.ones(hidden))
        self.norm_bias = _param(np.zeros(hidden))
        # zero-initialized output layer: training starts from uniform mixing weights
        self.w2 = _param(np.zeros((hidden, n * m)))
        self.b2 = _param(np.zeros(n * m))

    def pooled(self, scales: list[Tensor]) -> Tensor:
        if len(scales) != len(self.transforms):
            raise ValueError(f"expected {len(self.transforms)} scales, got {len(scales)}")
        for s in scales:
            if s.ndim != 3 or s.shape[2] != self.d:
                raise ValueError(f"every scale must have d={self.d} channels, got shape {s.shape}")
        maps = [t(s) for t, s in zip(self.transforms, scales)]
        z = maps[0]
        for fuse, finer in zip(self.fusions, maps[1:]):
            z = fuse(z, finer)
        h, w, d = z.shape
        return dc.mean_axis(dc.reshape(z, (h * w, d)), axis=0, keepdims=True)

    def logits(self, scales: list[Tensor]) -> Tensor:
        z = self.pooled(scales)
        hidden = dc.relu(dc.layer_norm(z @ self.w1 + self.b1) * self.norm_gain + self.norm_bias)
        return dc.reshape(hidden @ self.w2 + self.b2, (self.n, self.m))

    def __call__(self, scales: list[Tensor]) -> DynamicWeights:
        return DynamicWeights(dc.softmax_rows(self.logits(scales)))


def generate_weights(gen: WeightGenerator, scales: list[Tensor], n: int | None = None,
                     m: int | None = None) -> DynamicWeights:
    """Coarsest scale first."""
    if (n is not None and n != gen.n) or (m is not None and m != gen.m):
        raise ValueError(f"generator emits {gen.n} x {gen.m}, asked for {n} x {m}")
    return gen(scales)


def compose_queries(bank: PatternBank, weights: DynamicWeights | Tensor) -> Tensor:
    """Content queries as convex combinations of the pattern rows."""
    W = weights.W if isinstance(weights, DynamicWeights) else weights
    if W.ndim != 2 or W.shape[1] != bank.m:
        raise ValueError(f"weights have shape {W.shape}; bank holds {bank.m} patterns")
    return W @ bank.patterns


def diversity_loss(bank: PatternBank | Tensor) -> Tensor:
    """Mean absolute pairwise cosine similarity between distinct patterns."""
    patterns = bank.patterns if isinstance(bank, PatternBank) else bank
    m = patterns.shape[0]
    if m < 2:
        warnings.warn("diversity loss needs at least two patterns; returning 0", stacklevel=2)
        return Tensor(0.0)
    unit = dc.l2_normalize_rows(patterns)
    cos = unit @ unit.T
    off_diag = 1.0 - np.eye(m)
    return dc.scale(dc.sum_all(dc.abs(cos) * off_diag), 1.0 / (m * (m - 1)))
