"""Frozen-encoder evaluation: linear probing, low-rank-adapter probing,
language-space probing, zero-shot classification, limited-annotation label
budgets, and segmentation metrics.

All probes train a single linear layer (plus adapters in lora mode) with
full-batch AdamW under a fixed seed; the encoder checkpoint is never
mutated. Features default to the full-resolution upcast.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .dataio import SceneSample
from .encoder import (EncoderConfig, LoraAdapter, clone_params, encode,
                      make_lora_adapters, param_count, upcast)
from .geometry import build_correspondence
from .trainer import AdamState, adamw_step
from .views import View

logger = logging.getLogger(__name__)


class ProbeError(ValueError):
    pass


@dataclass
class ProbeConfig:
    mode: str = "linear"            # linear | lora | language
    level: int = 4                  # upcast level for probe features
    epochs: int = 50
    lr: float = 1e-3
    label_budget: Optional[int] = None  # labeled points kept per scene
    seed: int = 0
    standardize: bool = True
    weight_decay: float = 0.0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    lora_lr: Optional[float] = None     # None -> lr

    def __post_init__(self):
        if self.mode not in ("linear", "lora", "language"):
            raise ValueError(f"unknown probe mode '{self.mode}'")
        if self.label_budget is not None and self.label_budget <= 0:
            raise ValueError("label_budget must be positive when present")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class SegMetrics:
    per_class_iou: np.ndarray       # NaN where the union is empty
    miou: float
    macc: float
    allacc: float
    confusion: np.ndarray           # (C, C), rows = ground truth

    def to_dict(self) -> dict:
        return {"per_class_iou": [None if np.isnan(v) else float(v)
                                  for v in self.per_class_iou],
                "miou": float(self.miou), "macc": float(self.macc),
                "allacc": float(self.allacc)}


@dataclass
class TextSpace:
    class_embeddings: np.ndarray    # (C, D_text) unit rows

    def __post_init__(self):
        self.class_embeddings = np.asarray(self.class_embeddings, dtype=np.float64)
        norms = np.linalg.norm(self.class_embeddings, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("class embeddings must be unit rows")


def compute_metrics(pred, gt, num_classes: int) -> SegMetrics:
    """Confusion-matrix segmentation metrics; gt == -1 is ignored."""
    if num_classes <= 0:
        raise ValueError("num_classes must be positive")
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have the same length")
    keep = gt >= 0
    pred, gt = pred[keep], gt[keep]
    conf = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
    conf = conf.reshape(num_classes, num_classes).astype(np.int64)
    diag = np.diag(conf).astype(np.float64)
    rows = conf.sum(axis=1)
    cols = conf.sum(axis=0)
    union = rows + cols - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, diag / np.maximum(union, 1), np.nan)
        acc = np.where(rows > 0, diag / np.maximum(rows, 1), np.nan)
    miou = float(np.nanmean(iou)) if np.isfinite(iou).any() else 0.0
    macc = float(np.nanmean(acc)) if np.isfinite(acc).any() else 0.0
    allacc = float(diag.sum() / conf.sum()) if conf.sum() else 0.0
    return SegMetrics(per_class_iou=iou, miou=miou, macc=macc, allacc=allacc,
                      confusion=conf)


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

def plain_view(sample: SceneSample) -> View:
    return View(cloud=sample.cloud, origin_index=np.arange(sample.cloud.num_points),
                kind="global", principal=True)


def extract_features(sample: SceneSample, params, enc_cfg: EncoderConfig,
                     level: int = 4, adapters=None, train: bool = False,
                     rng=None) -> np.ndarray:
    """Upcast features of the unaugmented cloud; keeps the graph only when
    adapters are supplied (so plain probing stays cheap)."""
    res = encode(plain_view(sample), params, enc_cfg, adapters=adapters,
                 train=train, rng=rng)
    feats = upcast(res, level)
    return feats if adapters is not None else feats.data


def label_budget_indices(n: int, budget: Optional[int], seed: int, scene_idx: int) -> np.ndarray:
    """Deterministic seeded subset; budgets nest (b < b' share a prefix)."""
    if budget is None or budget >= n:
        return np.arange(n)
    perm = np.random.default_rng([seed, 0xB9d6, scene_idx]).permutation(n)
    return np.sort(perm[:budget])


def lift_patch_features_to_points(sample: SceneSample, eps_depth: float = 0.01):
    """Per-point mean of the image features of every patch the point is
    visible in; points seen by no view get zeros and valid=False."""
    n = sample.cloud.num_points
    grids = [v.flat_feature_grid() for v in sample.views]
    dim = grids[0].shape[1]
    corr = build_correspondence(sample.cloud.coords, sample.views, eps_depth)
    out = np.zeros((n, dim))
    if len(corr) == 0:
        return out, np.zeros(n, dtype=bool)
    rows = np.stack([grids[v][p] for v, p in zip(corr.view_index, corr.patch_index)])
    sums = T.scatter_add_rows(rows, corr.point_index, n)
    counts = np.bincount(corr.point_index, minlength=n)
    valid = counts > 0
    out[valid] = sums[valid] / counts[valid, None]
    return out, valid


# ---------------------------------------------------------------------------
# shared head training
# ---------------------------------------------------------------------------

def _standardize_fit(x: np.ndarray):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.maximum(sd, 1e-8)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    metrics: SegMetrics
    missing_train_classes: List[int]
    params_learnable: int
    adapters: Optional[Dict[str, LoraAdapter]] = None
    train_mu: Optional[np.ndarray] = None
    train_sd: Optional[np.ndarray] = None


def _softmax_head_epoch(head, feats_const: T.Tensor, targets: np.ndarray,
                        extra_params: Dict[str, T.Tensor], state: AdamState,
                        cfg: ProbeConfig, lr_factors: Dict[str, float]):
    logits = T.op_add(T.op_matmul(feats_const, head["head.w"]), head["head.b"])
    loss = T.op_cross_entropy_rows(T.Tensor(targets), T.op_log_softmax(logits))
    T.backward(loss)
    params = dict(head)
    params.update(extra_params)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for k, p in params.items()}
    for p in params.values():
        p.zero_grad()
    adamw_step(params, grads, state, cfg.lr, lr_factors,
               weight_decay=cfg.weight_decay)
    return float(loss.data)


def _predict(head, feats: np.ndarray) -> np.ndarray:
    logits = feats @ head["head.w"].data + head["head.b"].data
    return logits.argmax(axis=1)


def linear_probe(train_scenes: Sequence[Tuple[np.ndarray, np.ndarray]],
                 eval_scenes: Sequence[Tuple[np.ndarray, np.ndarray]],
                 num_classes: int, cfg: ProbeConfig) -> ProbeResult:
    """Single linear layer on frozen features, softmax cross-entropy, AdamW.

    ``train_scenes`` / ``eval_scenes`` are (features, labels) pairs; features
    may be concatenations of several sources. label_budget limits the
    labeled points used per training scene (seeded, nested).
    """
    xs, ys = [], []
    for i, (feats, labels) in enumerate(train_scenes):
        keep = label_budget_indices(feats.shape[0], cfg.label_budget, cfg.seed, i)
        keep = keep[labels[keep] >= 0]
        xs.append(feats[keep])
        ys.append(labels[keep])
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    if x.shape[0] == 0:
        raise ProbeError("no labeled training points after budgeting")
    missing = sorted(set(range(num_classes)) - set(np.unique(y).tolist()))
    if missing:
        logger.warning("classes absent from probe training set: %s", missing)

    mu, sd = _standardize_fit(x) if cfg.standardize else (0.0, 1.0)
    xn = (x - mu) * (1.0 / sd)
    dim = x.shape[1]
    head = {"head.w": T.param(np.zeros((dim, num_classes))),
            "head.b": T.param(np.zeros(num_classes))}
    state = AdamState.init(head)
    targets = _one_hot(y, num_classes)
    feats_const = T.Tensor(xn)
    for _epoch in range(cfg.epochs):
        _softmax_head_epoch(head, feats_const, targets, {}, state, cfg, {})

    pred_all, gt_all = [], []
    for feats, labels in eval_scenes:
        pred = _predict(head, (feats - mu) * (1.0 / sd))
        pred_all.append(pred)
        gt_all.append(labels)
    metrics = compute_metrics(np.concatenate(pred_all), np.concatenate(gt_all),
                              num_classes)
    return ProbeResult(weight=head["head.w"].data.copy(), bias=head["head.b"].data.copy(),
                       metrics=metrics, missing_train_classes=missing,
                       params_learnable=dim * num_classes + num_classes,
                       train_mu=np.asarray(mu), train_sd=np.asarray(sd))


def lora_probe(train_samples: Sequence[SceneSample], eval_samples: Sequence[SceneSample],
               frozen_params, enc_cfg: EncoderConfig, num_classes: int,
               cfg: ProbeConfig) -> ProbeResult:
    """Low-rank adapters on the frozen encoder plus a linear head.

    Only adapter and head parameters train. With a zero adapter rate this
    reduces exactly to the linear probe (adapters start as the identity).
    """
    base = clone_params(frozen_params)  # never receives gradients
    adapters = make_lora_adapters(base, rank=cfg.lora_rank, alpha=cfg.lora_alpha,
                                  dropout=cfg.lora_dropout, seed=cfg.seed)
    adapter_params: Dict[str, T.Tensor] = {}
    for name, ad in adapters.items():
        adapter_params[f"lora.{name}.a"] = ad.a
        adapter_params[f"lora.{name}.b"] = ad.b
    lora_lr = cfg.lr if cfg.lora_lr is None else cfg.lora_lr
    lr_factors = {k: (lora_lr / cfg.lr if cfg.lr > 0 else 0.0) for k in adapter_params}

    dim = enc_cfg.upcast_dim(cfg.level)
    head = {"head.w": T.param(np.zeros((dim, num_classes))),
            "head.b": T.param(np.zeros(num_classes))}
    state = AdamState.init({**head, **adapter_params})

    budgeted = []
    for i, s in enumerate(train_samples):
        keep = label_budget_indices(s.cloud.num_points, cfg.label_budget, cfg.seed, i)
        keep = keep[s.cloud.labels[keep] >= 0]
        budgeted.append(keep)

    missing = sorted(set(range(num_classes)) -
                     set(np.unique(np.concatenate(
                         [s.cloud.labels[k] for s, k in zip(train_samples, budgeted)])).tolist()))

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 0xD0, epoch])
        feats_list = [extract_features(s, base, enc_cfg, cfg.level, adapters=adapters,
                                       train=True, rng=rng) for s in train_samples]
        rows = [T.op_gather_rows(f, k) for f, k in zip(feats_list, budgeted)]
        x = rows[0] if len(rows) == 1 else T.op_concat_rows(rows)
        y = np.concatenate([s.cloud.labels[k] for s, k in zip(train_samples, budgeted)])
        if cfg.standardize:
            mu, sd = _standardize_fit(x.data)
            xn = T.op_mul(T.op_add(x, T.Tensor(-mu)), T.Tensor(1.0 / sd))
        else:
            mu, sd = np.zeros(dim), np.ones(dim)
            xn = x
        logits = T.op_add(T.op_matmul(xn, head["head.w"]), head["head.b"])
        loss = T.op_cross_entropy_rows(T.Tensor(_one_hot(y, num_classes)),
                                       T.op_log_softmax(logits))
        T.backward(loss)
        params = {**head, **adapter_params}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
        for p in params.values():
            p.zero_grad()
        adamw_step(params, grads, state, cfg.lr, lr_factors,
                   weight_decay=cfg.weight_decay)

    # final standardization stats from the adapted features
    final_feats = [extract_features(s, base, enc_cfg, cfg.level, adapters=adapters)
                   for s in train_samples]
    stacked = np.concatenate([f.data[k] for f, k in zip(final_feats, budgeted)])
    mu, sd = _standardize_fit(stacked) if cfg.standardize else (np.zeros(dim), np.ones(dim))

    pred_all, gt_all = [], []
    for s in eval_samples:
        feats = extract_features(s, base, enc_cfg, cfg.level, adapters=adapters)
        pred = _predict(head, (feats.data - mu) * (1.0 / sd))
        pred_all.append(pred)
        gt_all.append(s.cloud.labels)
    metrics = compute_metrics(np.concatenate(pred_all), np.concatenate(gt_all),
                              num_classes)
    learnable = sum(a.param_count for a in adapters.values()) + \
        head["head.w"].size + head["head.b"].size
    return ProbeResult(weight=head["head.w"].data.copy(), bias=head["head.b"].data.copy(),
                       metrics=metrics, missing_train_classes=missing,
                       params_learnable=int(learnable), adapters=adapters,
                       train_mu=mu, train_sd=sd)


# ---------------------------------------------------------------------------
# language probing and zero-shot
# ---------------------------------------------------------------------------

def language_probe(train_scenes: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]],
                   cfg: ProbeConfig):
    """Fit a linear map from point features to target text-space features by
    maximizing cosine similarity. No labels are consumed.

    ``train_scenes`` rows are (features, targets, valid_mask); invalid points
    (no visible patch) are excluded. Returns (map W, mean train cosine).
    """
    xs = [f[m] for f, _t, m in train_scenes]
    ts = [t[m] for _f, t, m in train_scenes]
    x = np.concatenate(xs, axis=0)
    t = np.concatenate(ts, axis=0)
    if x.shape[0] == 0:
        raise ProbeError("no visible points to fit the language probe")
    if np.abs(t).max() == 0:
        raise ProbeError("degenerate language targets: all zero vectors")
    # least-squares warm start (uses only features/targets), cosine polish after
    w0, *_ = np.linalg.lstsq(x, t, rcond=None)
    w = T.param(w0)
    state = AdamState.init({"w": w})
    feats_const = T.Tensor(x)
    targets_const = T.Tensor(t)
    cos_val = 0.0
    for _epoch in range(cfg.epochs):
        pred = T.op_matmul(feats_const, w)
        cos = T.op_cosine(pred, targets_const)
        loss = T.op_mean(T.op_add(T.op_mul(cos, -1.0), 1.0))
        T.backward(loss)
        grads = {"w": w.grad}
        w.zero_grad()
        adamw_step({"w": w}, grads, state, cfg.lr, {}, weight_decay=0.0)
        cos_val = 1.0 - float(loss.data)
    return w.data.copy(), cos_val


def zero_shot_segment(point_text_feats: np.ndarray, space: TextSpace,
                      gt: Optional[np.ndarray] = None):
    """Label each point by the closest class embedding (cosine); ties go to
    the lowest class index. Metrics are computed when ground truth is given."""
    feats = np.asarray(point_text_feats, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    cos = (feats / norms) @ space.class_embeddings.T
    labels = cos.argmax(axis=1)
    if gt is None:
        return labels, None
    return labels, compute_metrics(labels, gt, space.class_embeddings.shape[0])
