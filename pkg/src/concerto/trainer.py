"""Pretraining loop: AdamW with depth-scaled learning rates, cosine
annealing with warmup, an EMA teacher momentum schedule, image-usage
control, JSONL logging, and bit-exact checkpoint/resume.

Every random choice is derived statelessly from (seed, purpose, step), so a
resumed run consumes exactly the same randomness as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .ctsr import load_ctsr, save_ctsr
from .dataio import SceneSample
from .encoder import EncoderConfig, clone_params, encode, ema_update, init_params
from .geometry import Correspondence, build_correspondence
from .objectives import (ClusterLossConfig, LossWeights, combine, cross_loss,
                         intra_loss, make_report)
from .views import AugmentConfig, make_viewset

logger = logging.getLogger(__name__)

LOG_KEYS = ("step", "intra", "cross", "total", "lr", "m_ema")


class TrainerError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 0.004
    lr_depth_decay: float = 0.9   # per stage toward the input
    weight_decay: float = 0.05
    batch_size: int = 1
    ema_base: float = 0.996       # schedule runs ema_base -> 1 over training
    image_usage_ratio: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    eps_depth: float = 0.01
    visible_budget: Optional[int] = None
    checkpoint_every_epochs: int = 0  # 0 = final checkpoint only
    total_steps: Optional[int] = None  # override epochs * len(dataset)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.image_usage_ratio <= 1:
            raise ValueError("image_usage_ratio must be in [0, 1]")
        if not 0 <= self.ema_base <= 1:
            raise ValueError("ema_base must be in [0, 1]")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: Dict[str, T.Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   step=0)


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine annealing to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * progress))


def ema_schedule(step: int, total_steps: int, m_base: float) -> float:
    """Cosine ramp of the teacher momentum from m_base to 1."""
    if total_steps <= 0:
        return m_base
    progress = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - m_base) * 0.5 * (1.0 + np.cos(np.pi * progress))


def lr_depth_factors(params: Dict[str, T.Tensor], cfg: EncoderConfig,
                     decay: float) -> Dict[str, float]:
    """Per-parameter learning-rate factor: gamma^(stage depth from the
    output); heads sit at the output, the mask token at the input."""
    deepest = cfg.num_stages - 1
    factors = {}
    for name in params:
        if name.startswith("stage"):
            s = int(name[5:name.index(".")])
            factors[name] = decay ** (deepest - s)
        elif name == "mask_token":
            factors[name] = decay ** deepest
        else:
            factors[name] = 1.0
    return factors


def adamw_step(params: Dict[str, T.Tensor], grads: Dict[str, np.ndarray],
               state: AdamState, lr: float, lr_factors: Dict[str, float],
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """Standard decoupled-weight-decay Adam update, in place.

    Decay applies to 2-D weights only (not biases, tokens, prototypes-bias).
    Non-finite gradients abort the step naming the offending parameter.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainerError(f"non-finite gradient in parameter '{name}'")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        step_lr = lr * lr_factors.get(name, 1.0)
        if weight_decay > 0 and p.data.ndim == 2:
            p.data -= step_lr * weight_decay * p.data
        p.data -= step_lr * update
    state.step = t


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: Dict[str, T.Tensor]
    teacher: Dict[str, T.Tensor]
    state: AdamState
    center: np.ndarray
    step: int
    meta: dict


def save_checkpoint(path, params, teacher, state: AdamState, center: np.ndarray,
                    step: int, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    for sub, tensors in (("student", params), ("teacher", teacher)):
        for name, p in tensors.items():
            save_ctsr(path / sub / f"{name}.ctsr", p.data)
    for sub, arrays in (("adam_m", state.m), ("adam_v", state.v)):
        for name, arr in arrays.items():
            save_ctsr(path / sub / f"{name}.ctsr", arr)
    save_ctsr(path / "center.ctsr", center)
    doc = {"step": int(step), "adam_step": int(state.step),
           "param_names": sorted(params.keys())}
    doc.update(meta or {})
    (path / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise TrainerError(f"not a checkpoint directory: {path}")
    meta = json.loads(meta_path.read_text())
    names = meta["param_names"]
    params = {n: T.param(load_ctsr(path / "student" / f"{n}.ctsr")) for n in names}
    teacher = {n: T.Tensor(load_ctsr(path / "teacher" / f"{n}.ctsr")) for n in names}
    state = AdamState(m={n: load_ctsr(path / "adam_m" / f"{n}.ctsr") for n in names},
                      v={n: load_ctsr(path / "adam_v" / f"{n}.ctsr") for n in names},
                      step=int(meta["adam_step"]))
    center = load_ctsr(path / "center.ctsr")
    return Checkpoint(params=params, teacher=teacher, state=state, center=center,
                      step=int(meta["step"]), meta=meta)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: Dict[str, T.Tensor]
    teacher: Dict[str, T.Tensor]
    center: np.ndarray
    state: AdamState
    log: List[dict]
    checkpoints: List[Path]


def _scene_grids(sample: SceneSample):
    if any(v.feature_grid is None for v in sample.views) or not sample.views:
        return None
    return [v.flat_feature_grid() for v in sample.views]


def train(samples: Sequence[SceneSample], cfg: TrainConfig, enc_cfg: EncoderConfig,
          aug_cfg: AugmentConfig, cluster_cfg: ClusterLossConfig,
          out_dir=None, resume_from=None, log_every: int = 1,
          step_hook=None, stop_at_step: Optional[int] = None,
          checkpoint_meta: Optional[dict] = None) -> TrainResult:
    """Run the pretraining loop over scene samples.

    Deterministic under (configs, seed); a run resumed from a checkpoint at
    step k produces the same parameters and log lines as an uninterrupted
    run, bit for bit. ``step_hook(step, params, teacher, m_ema)`` is called
    after every optimizer/EMA update (observer only).
    """
    if not samples:
        raise TrainerError("dataset is empty")
    n = len(samples)
    total_steps = cfg.total_steps if cfg.total_steps is not None else cfg.epochs * n
    warmup_steps = int(round(cfg.warmup_fraction * total_steps))

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        params, teacher, state, center = ck.params, ck.teacher, ck.state, ck.center
        start_step = ck.step
    else:
        params = init_params(enc_cfg, seed=cfg.seed)
        teacher = clone_params(params)
        state = AdamState.init(params)
        center = np.zeros(enc_cfg.proto_count)
        start_step = 0

    factors = lr_depth_factors(params, enc_cfg, cfg.lr_depth_decay)
    corr_cache: Dict[str, Correspondence] = {}
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume_from else "w")

    log: List[dict] = []
    checkpoints: List[Path] = []
    end_step = total_steps if stop_at_step is None else min(stop_at_step, total_steps)
    reached = start_step
    try:
        for step in range(start_step, end_step):
            epoch = step // n
            order = np.random.default_rng([cfg.seed, 88, epoch]).permutation(n)
            sample = samples[order[step % n]]

            step_rng = np.random.default_rng([cfg.seed, 55, step])
            view_seed = int(step_rng.integers(2 ** 31))
            image_draw = step_rng.random()
            budget_seed = int(step_rng.integers(2 ** 31))

            grids = _scene_grids(sample)
            use_images = (grids is not None and cfg.weights.cross > 0
                          and image_draw < cfg.image_usage_ratio)

            vs = make_viewset(sample.cloud, aug_cfg, seed=view_seed)
            student = [(v, encode(v, params, enc_cfg)) for v in vs.student_views]
            teach = [(v, encode(v, teacher, enc_cfg)) for v in vs.teacher_views]

            intra, center, pairs = intra_loss(student, teach, params, teacher,
                                              center, cluster_cfg,
                                              level=enc_cfg.intra_upcast_level)
            cross = None
            patches = 0
            if use_images:
                if sample.scene_id not in corr_cache:
                    corr_cache[sample.scene_id] = build_correspondence(
                        sample.cloud.coords, sample.views, cfg.eps_depth)
                cross, patches = cross_loss(student[0][1], corr_cache[sample.scene_id],
                                            grids, params,
                                            level=enc_cfg.cross_upcast_level,
                                            budget=cfg.visible_budget,
                                            seed=budget_seed)
            total = combine(intra, cross, cfg.weights, image_present=use_images)
            if not np.isfinite(total.data).all():
                if out is not None:
                    save_checkpoint(out / "dump_nonfinite", params, teacher, state,
                                    center, step, meta=checkpoint_meta)
                raise TrainerError(f"non-finite loss at step {step}")

            T.backward(total)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in params.items()}
            for p in params.values():
                p.zero_grad()
            if cfg.grad_clip is not None:
                clip_gradients(grads, cfg.grad_clip)
            lr = lr_schedule(step, total_steps, cfg.base_lr, warmup_steps)
            adamw_step(params, grads, state, lr, factors, cfg.beta1, cfg.beta2,
                       cfg.adam_eps, cfg.weight_decay)
            m_ema = ema_schedule(step, total_steps, cfg.ema_base)
            ema_update(teacher, params, m_ema)
            if step_hook is not None:
                step_hook(step, params, teacher, m_ema)

            report = make_report(intra.item(), cross.item() if cross is not None else 0.0,
                                 cfg.weights, use_images, pairs, patches)
            row = {"step": step, "intra": report.intra, "cross": report.cross,
                   "total": report.total, "lr": float(lr), "m_ema": float(m_ema)}
            if step % log_every == 0 or step == total_steps - 1:
                log.append(row)
                if log_fh is not None:
                    log_fh.write(json.dumps(row) + "\n")
                    log_fh.flush()

            reached = step + 1
            end_of_epoch = (step + 1) % n == 0
            if (out is not None and cfg.checkpoint_every_epochs > 0 and end_of_epoch
                    and ((step + 1) // n) % cfg.checkpoint_every_epochs == 0):
                checkpoints.append(save_checkpoint(out / f"ckpt_step{step + 1:06d}",
                                                   params, teacher, state, center,
                                                   step + 1, meta=checkpoint_meta))
        if out is not None:
            checkpoints.append(save_checkpoint(out / "ckpt_final", params, teacher,
                                               state, center, reached,
                                               meta=checkpoint_meta))
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(params=params, teacher=teacher, center=center, state=state,
                       log=log, checkpoints=checkpoints)
