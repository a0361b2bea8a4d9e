"""Synthetic detection world and a minimal query-based detector.

Scenes are procedurally rendered feature maps (no images): every cell of a
coarse 4x4 and a fine 8x8 grid carries the class signature of each object
weighted by how much of the cell the object's box covers, plus Gaussian noise.

The detector composes its queries either from a learnable table (static
mode) or from shared patterns mixed by content-conditioned weights (dynamic
mode), refines them through ``n_layers`` decoder layers (self-attention,
cross-attention over the fine tokens, FFN) and predicts class logits and
boxes after every layer.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .assignment import assign, one_to_many_loss
from .diffcore import Module, Tensor
from .geometry import Box, pairwise_iou, squash_boxes
from .matching import LossWeights, Matching, cost_from_arrays, hungarian, one_to_one_loss
from .metrics import ACTIVATION_CONFIDENCE, ACTIVATION_IOU, ActivationCounts, gini, mean_average_precision
from .patterns import DynamicWeights, PatternBank, WeightGenerator, compose_queries, diversity_loss
from .records import RunRecord

log = logging.getLogger(__name__)

MODES = ("static", "dynamic")
ASSIGNMENTS = ("one-to-one", "fixed-k", "quality-aware")
DIVERGENCE_LIMIT = 1e4
COARSE, FINE = 4, 8
# width of the Gaussian prior pulling each query's cross-attention toward its reference point
ATTENTION_RADIUS = 0.15
# rendered features have norm <= 1; scaling them keeps the scene's share of each query update visible
INPUT_GAIN = 4.0


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "dynamic"
    assignment: str = "quality-aware"
    n_queries: int = 60
    n_patterns: int = 10
    d: int = 16
    n_layers: int = 2
    n_classes: int = 6
    gamma: float = 0.4
    k: int = 4
    l: int = 1
    beta: float = 0.2
    loss_weights: tuple[float, float, float] = (2.0, 5.0, 2.0)
    background_weight: float = 0.1
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0
    lr: float = 0.01
    momentum: float = 0.9
    lr_drop_fraction: float = 0.85
    grad_clip: float = 1.0
    batch_size: int = 1
    epochs: int = 30
    train_scenes: int = 200
    val_scenes: int = 50
    max_objects: int = 4
    noise: float = 0.1
    world_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(float(x) for x in self.loss_weights)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"assignment must be one of {ASSIGNMENTS}, got {self.assignment!r}")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if not self.k >= self.l >= 1:
            raise ValueError(f"need k >= l >= 1, got k={self.k}, l={self.l}")
        if not 1 <= self.max_objects <= 8:
            raise ValueError("max_objects must lie in [1, 8]")
        if self.k > self.n_queries:
            raise ValueError("k cannot exceed the number of queries")
        if len(self.loss_weights) != 3:
            raise ValueError("loss_weights is a (cls, l1, giou) triple")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(*self.loss_weights)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["loss_weights"] = list(self.loss_weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    gt_boxes: np.ndarray     # g x 4, (cx, cy, w, h)
    gt_classes: np.ndarray   # g
    coarse: np.ndarray       # 4 x 4 x d
    fine: np.ndarray         # 8 x 8 x d
    seed: int

    @property
    def ground_truths(self) -> list[tuple[Box, int]]:
        return [(Box.from_array(b), int(c)) for b, c in zip(self.gt_boxes, self.gt_classes)]

    @property
    def n_objects(self) -> int:
        return len(self.gt_classes)


def class_signatures(n_classes: int, d: int, world_seed: int = 0) -> np.ndarray:
    """Unit-norm signature vector per class, fixed for a given world."""
    rng = np.random.default_rng([world_seed, 7919])
    sig = rng.normal(size=(n_classes, d))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def cell_coverage(boxes: np.ndarray, grid: int) -> np.ndarray:
    """Fraction of each grid cell covered by each box: (g, grid, grid)."""
    edges = np.arange(grid + 1) / grid
    lo, hi = edges[:-1], edges[1:]
    half = boxes[:, 2:] / 2
    x1, y1 = boxes[:, 0] - half[:, 0], boxes[:, 1] - half[:, 1]
    x2, y2 = boxes[:, 0] + half[:, 0], boxes[:, 1] + half[:, 1]
    ox = np.clip(np.minimum(x2[:, None], hi) - np.maximum(x1[:, None], lo), 0, None) * grid
    oy = np.clip(np.minimum(y2[:, None], hi) - np.maximum(y1[:, None], lo), 0, None) * grid
    return oy[:, :, None] * ox[:, None, :]  # rows index y, columns index x


def render_scene(seed: int, d: int = 16, n_classes: int = 6, max_objects: int = 4, noise: float = 0.1,
                 world_seed: int = 0, min_size: float = 0.15, max_size: float = 0.4,
                 min_center_distance: float = 0.1, n_objects: int | None = None) -> Scene:
    """Sample ground truths and render both feature scales. Deterministic in ``seed``."""
    rng = np.random.default_rng([world_seed, int(seed)])
    count = int(n_objects) if n_objects is not None else int(rng.integers(1, max_objects + 1))
    if not 1 <= count <= 8:
        raise ValueError(f"object count must lie in [1, 8], got {count}")
    boxes: list[np.ndarray] = []
    while len(boxes) < count:
        placed = False
        for _ in range(100):
            w, h = rng.uniform(min_size, max_size, size=2)
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            if all(np.hypot(cx - b[0], cy - b[1]) >= min_center_distance for b in boxes):
                boxes.append(np.array([cx, cy, w, h]))
                placed = True
                break
        if not placed:
            warnings.warn(f"scene {seed}: could only place {len(boxes)} of {count} objects", stacklevel=2)
            count = max(len(boxes), 1)
    gt_boxes = np.array(boxes)
    gt_classes = rng.integers(0, n_classes, size=len(boxes))
    sig = class_signatures(n_classes, d, world_seed)
    maps = []
    for grid in (COARSE, FINE):
        cover = cell_coverage(gt_boxes, grid)
        feat = np.einsum("gyx,gd->yxd", cover, sig[gt_classes])
        maps.append(feat + rng.normal(0.0, noise, size=feat.shape))
    return Scene(gt_boxes, gt_classes, maps[0], maps[1], int(seed))


def positional_encoding(grid: int, d: int) -> np.ndarray:
    """Fixed sin/cos code of cell centres, (grid*grid) x d, row-major over (y, x)."""
    centers = (np.arange(grid) + 0.5) / grid
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    n_freq = max(d // 4, 1)
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    parts = []
    for coord in (xs.ravel(), ys.ravel()):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    pe = np.concatenate(parts, axis=1)
    if pe.shape[1] < d:
        pe = np.pad(pe, ((0, 0), (0, d - pe.shape[1])))
    return pe[:, :d]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return _param(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))


class Norm(Module):
    def __init__(self, d: int):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x) * self.gain + self.bias


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
              bias: Tensor | None = None) -> Tensor:
    d = wq.shape[1]
    scores = dc.scale((q_in @ wq) @ (k_in @ wk).T, 1.0 / math.sqrt(d))
    if bias is not None:
        scores = scores + bias
    return dc.softmax_rows(scores) @ (v_in @ wv)


def spatial_prior(ref_xy: Tensor, cells: np.ndarray, radius: float = ATTENTION_RADIUS) -> Tensor:
    """Log of an isotropic Gaussian around each reference point, evaluated at cell centres."""
    sq = dc.sum_axis(ref_xy * ref_xy, axis=1, keepdims=True)
    cross = ref_xy @ Tensor(cells.T)
    dist2 = sq - dc.scale(cross, 2.0) + (cells * cells).sum(axis=1)
    return dc.scale(dist2, -0.5 / radius ** 2)


class DecoderLayer(Module):
    """Single-head self-attention, cross-attention and FFN, post-norm residuals."""

    def __init__(self, d: int, rng: np.random.Generator, ffn: int | None = None):
        ffn = ffn or 2 * d
        self.self_q, self.self_k, self.self_v = (_glorot(rng, d, d) for _ in range(3))
        self.cross_q, self.cross_k, self.cross_v = (_glorot(rng, d, d) for _ in range(3))
        self.ffn_in = _glorot(rng, d, ffn)
        self.ffn_in_bias = _param(np.zeros(ffn))
        self.ffn_out = _glorot(rng, ffn, d)
        self.ffn_out_bias = _param(np.zeros(d))
        self.norms = [Norm(d) for _ in range(3)]

    def __call__(self, q: Tensor, pos: Tensor, keys: Tensor, values: Tensor, prior: Tensor) -> Tensor:
        qp = q + pos
        q = self.norms[0](q + attention(qp, qp, q, self.self_q, self.self_k, self.self_v))
        q = self.norms[1](q + attention(q + pos, keys, values, self.cross_q, self.cross_k, self.cross_v, prior))
        hidden = dc.relu(q @ self.ffn_in + self.ffn_in_bias)
        return self.norms[2](q + hidden @ self.ffn_out + self.ffn_out_bias)


@dataclass
class LayerOutput:
    logits: Tensor   # n x (C + 1); last column is background
    boxes: Tensor    # n x 4 in (0, 1]
    centre_logits: Tensor | None = None  # n x 2, pre-sigmoid box centres

    def probabilities(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predictions(self) -> list[tuple[Box, np.ndarray]]:
        probs = self.probabilities()
        return [(Box.from_array(b), p) for b, p in zip(self.boxes.data, probs)]


@dataclass
class DecodeOutput:
    layers: list[LayerOutput]
    weights: DynamicWeights | None
    queries: Tensor

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


class DetectorModel(Module):
    def __init__(self, config: TrainConfig):
        self.config = config
        n, m, d, C = config.n_queries, config.n_patterns, config.d, config.n_classes
        # independent streams so shared components initialize identically in both modes
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(5)]
        q_rng, gen_rng, pos_rng, dec_rng, head_rng = streams
        self.bank: PatternBank | None = None
        self.generator: WeightGenerator | None = None
        self.query_table: Tensor | None = None
        if config.mode == "dynamic":
            self.bank = PatternBank(m, d, data=q_rng.normal(0.0, 1.0 / np.sqrt(d), size=(m, d)))
            self.generator = WeightGenerator(d, n, m, n_scales=2, rng=gen_rng, extents=[COARSE, FINE])
        else:
            self.query_table = _param(q_rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d)))
        self.query_pos = _param(pos_rng.normal(0.0, 1.0, size=(n, d)))
        anchors = pos_rng.uniform(0.05, 0.95, size=(n, 2))
        self.reference = _param(np.log(anchors / (1.0 - anchors)))  # logit space
        self.layers = [DecoderLayer(d, dec_rng) for _ in range(config.n_layers)]
        self.cls_w = _glorot(head_rng, d, C + 1)
        self.cls_b = _param(np.zeros(C + 1))
        # three-layer box MLP
        self.box_w = [_glorot(head_rng, d, d), _glorot(head_rng, d, d), _glorot(head_rng, d, 4)]
        self.box_b = [_param(np.zeros(d)), _param(np.zeros(d)), _param(np.array([0.0, 0.0, -1.0, -1.0]))]
        self.token_pos = positional_encoding(FINE, d)
        centers = (np.arange(FINE) + 0.5) / FINE
        ys, xs = np.meshgrid(centers, centers, indexing="ij")
        self.cell_xy = np.stack([xs.ravel(), ys.ravel()], axis=1)
        self.pinned_weights: np.ndarray | None = None

    @property
    def dynamic(self) -> bool:
        return self.bank is not None

    def mixing_weights(self, scene: Scene) -> DynamicWeights:
        if self.pinned_weights is not None:
            return DynamicWeights(Tensor(self.pinned_weights))
        return self.generator([Tensor(scene.coarse), Tensor(scene.fine)])

    def heads(self, q: Tensor, reference: Tensor) -> LayerOutput:
        """Class logits and boxes; box centres are offsets from ``reference`` (logit space)."""
        logits = q @ self.cls_w + self.cls_b
        raw = q
        for i, (w, b) in enumerate(zip(self.box_w, self.box_b)):
            raw = raw @ w + b
            if i < len(self.box_w) - 1:
                raw = dc.relu(raw)
        anchor = dc.concat([reference, Tensor(np.zeros((q.shape[0], 2)))], axis=1)
        raw = raw + anchor
        return LayerOutput(logits, squash_boxes(raw), raw[:, :2])


def decode(model: DetectorModel, scene: Scene) -> DecodeOutput:
    cfg = model.config
    if scene.fine.shape[2] != cfg.d:
        raise ValueError(f"scene width {scene.fine.shape[2]} does not match model width {cfg.d}")
    weights = None
    if model.dynamic:
        weights = model.mixing_weights(scene)
        content = compose_queries(model.bank, weights)
    else:
        content = model.query_table
    q = content
    # position enters the keys only through the spatial prior, so key projections see pure content
    keys = Tensor(scene.fine.reshape(-1, cfg.d) * INPUT_GAIN)
    values = keys + model.token_pos
    reference = model.reference
    outputs = []
    for layer in model.layers:
        prior = spatial_prior(dc.sigmoid(reference), model.cell_xy)
        q = layer(q, model.query_pos, keys, values, prior)
        out = model.heads(q, reference)
        outputs.append(out)
        # the next layer refines around this layer's centres
        reference = out.centre_logits
    return DecodeOutput(outputs, weights, content)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: Tensor
    one_to_many: float
    aux: float
    div: float
    matchings: list[Matching] = field(default_factory=list)
    positives_per_layer: list[int] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "one_to_many": self.one_to_many,
                "aux": self.aux, "div": self.div}


def final_layer_matching(layer: LayerOutput, scene: Scene, weights: LossWeights) -> Matching:
    cost = cost_from_arrays(layer.boxes.data, layer.probabilities(), scene.gt_boxes, scene.gt_classes, weights)
    return hungarian(cost)


def total_loss(outputs: DecodeOutput, scene: Scene, config: TrainConfig,
               model: DetectorModel | None = None) -> LossBreakdown:
    """``one_to_many + aux + beta * div`` with its components.

    ``aux`` is the one-to-one loss summed over every layer; ``one_to_many``
    covers the intermediate layers only, so the final layer always stays
    one-to-one.
    """
    w = config.weights
    aux_terms, o2m_terms, matchings, n_pos = [], [], [], []
    last = len(outputs.layers) - 1
    for idx, layer in enumerate(outputs.layers):
        match = final_layer_matching(layer, scene, w)
        matchings.append(match)
        aux_terms.append(one_to_one_loss(match, layer.logits, layer.boxes, scene.gt_boxes, scene.gt_classes,
                                         w, config.background_weight))
        if idx < last and config.assignment != "one-to-one":
            probs = layer.probabilities()
            confidence = probs[:, :-1].max(axis=1)
            plan = assign(layer.boxes.data, confidence, scene.gt_boxes, config.gamma, config.k, config.l,
                          adaptive=config.assignment == "quality-aware")
            n_pos.append(int(sum(plan.counts)))
            o2m_terms.append(one_to_many_loss(plan, layer.logits, layer.boxes, scene.gt_boxes,
                                              scene.gt_classes, w, config.vfl_alpha, config.vfl_gamma))
    aux = _sum(aux_terms)
    o2m = _sum(o2m_terms)
    bank = model.bank if model is not None else None
    div = diversity_loss(bank) if bank is not None else Tensor(0.0)
    total = o2m + aux + dc.scale(div, config.beta)
    return LossBreakdown(total, o2m.item(), aux.item(), config.beta * div.item(), matchings, n_pos)


def _sum(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    map: float
    gini: float
    activations: ActivationCounts


def evaluate(model: DetectorModel, scenes: list[Scene], weights: LossWeights | None = None) -> EvalResult:
    """Validation mAP and final-layer query utilization over ``scenes``."""
    cfg = model.config
    weights = weights or cfg.weights
    counts = ActivationCounts.empty(cfg.n_queries, cfg.n_patterns if model.dynamic else 0)
    detections, gts = [], []
    with dc.no_grad():
        for scene in scenes:
            out = decode(model, scene)
            final = out.final
            probs = final.probabilities()
            fg = probs[:, :-1]
            scores, classes = fg.max(axis=1), fg.argmax(axis=1)
            boxes = final.boxes.data
            detections.append((boxes, scores, classes))
            gts.append((scene.gt_boxes, scene.gt_classes))
            match = final_layer_matching(final, scene, weights)
            best_iou = pairwise_iou(boxes, scene.gt_boxes).max(axis=1)
            confident = np.flatnonzero((scores > ACTIVATION_CONFIDENCE) & (best_iou > ACTIVATION_IOU))
            w = out.weights.matrix if out.weights is not None else None
            counts.add_scene(match.pred_indices, w, confident)
    return EvalResult(mean_average_precision(detections, gts), counts.gini, counts)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def scene_seeds(config: TrainConfig, split: str) -> list[int]:
    base = {"train": 10_000_000, "val": 20_000_000}[split]
    count = config.train_scenes if split == "train" else config.val_scenes
    return [base + config.seed * 100_000 + i for i in range(count)]


def make_scenes(config: TrainConfig, split: str) -> list[Scene]:
    return [render_scene(s, config.d, config.n_classes, config.max_objects, config.noise, config.world_seed)
            for s in scene_seeds(config, split)]


class Momentum:
    """Heavy-ball gradient descent with global-norm clipping."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9, clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        factor = self.clip / norm if self.clip > 0 and norm > self.clip else 1.0
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += factor * g
            p.data -= self.lr * v
        return norm


def train(config: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> RunRecord:
    """Train from scratch; deterministic given ``config``."""
    return fit(config, on_epoch)[1]


def fit(config: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> tuple[DetectorModel, RunRecord]:
    """Like :func:`train` but also returns the trained model."""
    start = time.perf_counter()
    model = DetectorModel(config)
    record = RunRecord(config=config.to_dict(), parameter_count=model.parameter_count())
    log.info("model has %d parameters (mode=%s)", record.parameter_count, config.mode)
    train_set = make_scenes(config, "train")
    val_set = make_scenes(config, "val")
    params = model.parameters()
    opt = Momentum(params, config.lr, config.momentum, config.grad_clip)
    drop_epoch = int(math.floor(config.lr_drop_fraction * config.epochs))
    order_rng = np.random.default_rng([config.seed, 4099])
    last_eval = None
    for epoch in range(config.epochs):
        opt.lr = config.lr * (0.1 if epoch >= drop_epoch else 1.0)
        order = order_rng.permutation(len(train_set))
        sums = np.zeros(4)
        for b in range(0, len(order), config.batch_size):
            batch = order[b:b + config.batch_size]
            model.zero_grad()
            for idx in batch:
                scene = train_set[idx]
                out = decode(model, scene)
                parts = total_loss(out, scene, config, model)
                value = parts.total.item()
                if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                    record.status = "diverged"
                    record.diagnostic = (f"epoch {epoch + 1}: loss {value!r} on scene {scene.seed} "
                                         f"(limit {DIVERGENCE_LIMIT:g})")
                    record.duration_s = time.perf_counter() - start
                    log.warning(record.diagnostic)
                    return model, record
                sums += (value, parts.one_to_many, parts.aux, parts.div)
                dc.backward(dc.scale(parts.total, 1.0 / len(batch)))
            opt.step()
            if model.bank is not None:
                model.bank.enforce_nonzero()
        means = sums / len(train_set)
        last_eval = evaluate(model, val_set)
        row = {"epoch": epoch + 1, "lr": opt.lr, "loss_total": float(means[0]),
               "loss_one_to_many": float(means[1]), "loss_aux": float(means[2]),
               "loss_div": float(means[3]), "map": last_eval.map, "gini": last_eval.gini}
        record.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if last_eval is not None:
        record.match_counts = last_eval.activations.match_counts.tolist()
        record.pattern_activation = last_eval.activations.pattern_mass.tolist()
    record.duration_s = time.perf_counter() - start
    return model, record
