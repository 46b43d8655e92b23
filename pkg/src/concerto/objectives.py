"""The dual self-supervised objective.

Intra-modal branch: online-clustering cross-entropy between a centered,
temperature-sharpened teacher prototype distribution (global views, no
gradient) and the student's prototype log-probabilities (masked + local
views), averaged over matched point pairs and over view combinations.

Cross-modal branch: per-patch mean pooling of the first masked view's
point features, a linear head into the image feature space, and a
(1 - cosine) criterion against the frozen per-patch image features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .encoder import EncodeResult, cross_head, proj_head, proto_scores, upcast
from .geometry import Correspondence
from .views import View, match_views

logger = logging.getLogger(__name__)


@dataclass
class ClusterLossConfig:
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("temperatures must be positive")
        if not 0 <= self.center_momentum < 1:
            raise ValueError("center momentum must be in [0, 1)")


@dataclass
class LossWeights:
    cross: float = 2.0
    intra: float = 2.0

    def __post_init__(self):
        if self.cross < 0 or self.intra < 0:
            raise ValueError("loss weights must be non-negative")
        if self.cross == 0 and self.intra == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossReport:
    intra: float
    cross: float
    total: float
    matched_pair_count: int
    nonempty_patch_count: int


def _teacher_probs(params_t, feats: T.Tensor, center: np.ndarray, cfg: ClusterLossConfig):
    """Centered, sharpened teacher prototype distribution plus raw logits.

    Everything on the teacher side is constant; plain arrays come back.
    """
    z = proj_head(params_t, feats)
    logits = proto_scores(params_t, z).data
    shifted = (logits - center) / cfg.teacher_temp
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), logits


def intra_loss(student: Sequence[Tuple[View, EncodeResult]],
               teacher: Sequence[Tuple[View, EncodeResult]],
               params_s, params_t, center: np.ndarray, cfg: ClusterLossConfig,
               level: int = 2):
    """Clustering cross-entropy over all (student view, teacher view) pairs.

    Returns (loss tensor, updated center, matched pair count). Pairing is by
    original point index; each matched point contributes the feature of its
    upcast-level ancestor. The center update is the momentum mean of the raw
    teacher logits seen this step.
    """
    if not teacher:
        raise ValueError("intra_loss needs at least one teacher view")
    n_stages = teacher[0][1].num_stages
    stage = n_stages - 1 - level

    teacher_sides = []
    all_logits = []
    for view, enc in teacher:
        probs, logits = _teacher_probs(params_t, upcast(enc, level), center, cfg)
        teacher_sides.append((view, enc, probs))
        all_logits.append(logits)

    combo_losses = []
    total_pairs = 0
    for s_view, s_enc in student:
        feats = upcast(s_enc, level)
        logq = T.op_log_softmax(proto_scores(params_s, proj_head(params_s, feats)),
                                cfg.student_temp)
        s_anc = s_enc.ancestors(stage)
        rows = feats.data.shape[0]
        for t_view, t_enc, t_probs in teacher_sides:
            if s_view is t_view:
                continue
            ia, ib = match_views(s_view, t_view)
            if ia.size == 0:
                continue
            t_anc = t_enc.ancestors(stage)
            # aggregate teacher distributions onto student feature rows so the
            # cross-entropy is one weighted sum per student view; duplicate
            # (student row, teacher row) pairs collapse to a count first
            m_rows = t_probs.shape[0]
            codes = s_anc[ia] * m_rows + t_anc[ib]
            uniq, counts = np.unique(codes, return_counts=True)
            agg = T.scatter_add_rows(t_probs[uniq % m_rows] * counts[:, None],
                                     uniq // m_rows, rows)
            combo_losses.append(T.op_mul(T.op_sum(T.op_mul(logq, T.Tensor(agg))),
                                         -1.0 / ia.size))
            total_pairs += int(ia.size)

    if not combo_losses:
        logger.warning("intra_loss: zero matched pairs across all view combinations")
        loss = T.Tensor(np.array(0.0))
    else:
        acc = combo_losses[0]
        for extra in combo_losses[1:]:
            acc = T.op_add(acc, extra)
        loss = T.op_mul(acc, 1.0 / len(combo_losses))

    batch_mean = np.concatenate(all_logits, axis=0).mean(axis=0)
    new_center = cfg.center_momentum * center + (1 - cfg.center_momentum) * batch_mean
    return loss, new_center, total_pairs


def assign_patches(enc: EncodeResult, corr: Correspondence, level: int,
                   budget: Optional[int] = None, seed: int = 0):
    """Patch assignment for pooled points at the given upcast level.

    Each correspondence entry names a source point; the entry votes for its
    upcast-level ancestor. Every (view, ancestor) group takes the majority
    patch, ties to the lowest patch index. Returns (member_rows, segment_ids,
    view_of_segment, patch_of_segment, num_segments).
    """
    stage = enc.num_stages - 1 - level
    entries = corr.entries
    if budget is not None and entries.shape[0] > budget:
        rng = np.random.default_rng(seed)
        keep = rng.choice(entries.shape[0], size=budget, replace=False)
        entries = entries[np.sort(keep)]
    if entries.shape[0] == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, empty, 0
    anc = enc.ancestors(stage)
    u = anc[entries[:, 0]]
    view = entries[:, 1]
    patch = entries[:, 4]
    # count votes per (view, ancestor, patch) via packed codes
    n_u = int(u.max()) + 1
    n_p = int(patch.max()) + 1
    codes, counts = np.unique((view * n_u + u) * n_p + patch, return_counts=True)
    c_patch = codes % n_p
    c_u = (codes // n_p) % n_u
    c_view = codes // (n_p * n_u)
    # majority with ties to the lowest patch: sort by (view, u, -count, patch)
    order = np.lexsort((c_patch, -counts, c_u, c_view))
    gv, gu, gp = c_view[order], c_u[order], c_patch[order]
    first = np.ones(gv.size, dtype=bool)
    first[1:] = (np.diff(gv) != 0) | (np.diff(gu) != 0)
    member_rows = gu[first]
    vp_codes = gv[first] * n_p + gp[first]
    seg_keys, seg_ids = np.unique(vp_codes, return_inverse=True)
    return (member_rows, seg_ids.astype(np.int64), seg_keys // n_p, seg_keys % n_p,
            seg_keys.shape[0])


def cross_loss(enc: EncodeResult, corr: Correspondence, grids: List[np.ndarray],
               params, level: int = 3, budget: Optional[int] = None, seed: int = 0,
               eps: float = 1e-8):
    """Mean (1 - cosine) between predicted and stored patch features.

    ``grids`` holds one (num_patches, D) array per view; patches with no
    assigned points are excluded. Returns (loss tensor, nonempty patches).
    """
    member_rows, seg_ids, seg_view, seg_patch, n_seg = assign_patches(
        enc, corr, level, budget=budget, seed=seed)
    if n_seg == 0:
        logger.warning("cross_loss: no nonempty patches")
        return T.Tensor(np.array(0.0)), 0
    feats = upcast(enc, level)
    members = T.op_gather_rows(feats, member_rows)
    pooled, nonempty = T.op_segment_mean(members, seg_ids, n_seg)
    assert nonempty.all()  # segments are built from their members
    predicted = cross_head(params, pooled)
    targets = np.stack([grids[v][p] for v, p in zip(seg_view, seg_patch)])
    cos = T.op_cosine(predicted, T.Tensor(targets), eps=eps)
    loss = T.op_mean(T.op_add(T.op_mul(cos, -1.0), 1.0))
    return loss, int(n_seg)


def combine(intra: T.Tensor, cross: Optional[T.Tensor], weights: LossWeights,
            image_present: bool):
    """Weighted total; without images the cross branch is skipped entirely."""
    total = T.op_mul(intra, weights.intra)
    if image_present:
        if cross is None:
            raise ValueError("image_present=True but no cross loss given")
        total = T.op_add(total, T.op_mul(cross, weights.cross))
    return total


def make_report(intra: float, cross: float, weights: LossWeights, image_present: bool,
                matched_pair_count: int, nonempty_patch_count: int) -> LossReport:
    total = weights.intra * intra + (weights.cross * cross if image_present else 0.0)
    return LossReport(intra=float(intra), cross=float(cross), total=float(total),
                      matched_pair_count=matched_pair_count,
                      nonempty_patch_count=nonempty_patch_count)
