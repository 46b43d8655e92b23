"""Hierarchical voxel-pooling point encoder with teacher/student parameter
pairs, upcast feature concatenation, projection/prototype/cross heads, and
optional low-rank adapters.

Stage 0 embeds per-point input features (colors plus intra-voxel coordinate
offsets; no absolute coordinates, so features cannot shortcut through
position). Each later stage mean-pools the previous stage over a voxel grid
and applies an MLP; a single voxel-neighborhood mean per stage mixes in
local context. ``upcast`` walks coarse features back toward fine point sets
with per-step concatenation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .geometry import voxelize
from .views import View

logger = logging.getLogger(__name__)

INPUT_DIM = 6  # rgb + intra-voxel offset


@dataclass
class EncoderConfig:
    stage_dims: List[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    cell_sizes: List[float] = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4])
    mlp_depth: int = 2
    proto_count: int = 1024
    proj_dim: int = 256
    cross_dim: Optional[int] = None
    intra_upcast_level: int = 2
    cross_upcast_level: int = 3

    def __post_init__(self):
        if len(self.cell_sizes) != len(self.stage_dims) - 1:
            raise ValueError("need exactly len(stage_dims) - 1 pooling cell sizes")
        if any(d <= 0 for d in self.stage_dims) or any(c <= 0 for c in self.cell_sizes):
            raise ValueError("stage dims and cell sizes must be positive")
        if self.mlp_depth < 1:
            raise ValueError("mlp_depth must be at least 1")
        for lvl in (self.intra_upcast_level, self.cross_upcast_level):
            if not 0 <= lvl <= self.num_pool_steps:
                raise ValueError(f"upcast level {lvl} out of range 0..{self.num_pool_steps}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def num_pool_steps(self) -> int:
        return len(self.cell_sizes)

    def upcast_dim(self, level: int) -> int:
        """Feature width after ``level`` upcast steps from the coarsest stage."""
        if not 0 <= level <= self.num_pool_steps:
            raise ValueError(f"upcast level {level} out of range")
        return int(sum(self.stage_dims[self.num_stages - 1 - level:]))

    @property
    def intra_feature_dim(self) -> int:
        return self.upcast_dim(self.intra_upcast_level)

    @property
    def cross_feature_dim(self) -> int:
        return self.upcast_dim(self.cross_upcast_level)


@dataclass
class LoraAdapter:
    """Additive low-rank update for one weight matrix: W + (alpha/r) A B,
    with A (d_in, r) random and B (r, d_out) zero so the adapted map starts
    exactly equal to W."""

    a: T.Tensor
    b: T.Tensor
    rank: int
    alpha: float
    dropout: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def param_count(self) -> int:
        return self.a.size + self.b.size


def _stage_in_dim(cfg: EncoderConfig, s: int) -> int:
    return INPUT_DIM if s == 0 else cfg.stage_dims[s - 1]


def init_params(cfg: EncoderConfig, seed: int = 0) -> Dict[str, T.Tensor]:
    """Student parameter set. Weight layout is (d_in, d_out); y = x @ w + b."""
    if cfg.cross_dim is None:
        raise ValueError("cross_dim must be set (the image feature width) before init")
    rng = np.random.default_rng([seed, 0xE2C0])
    params: Dict[str, T.Tensor] = {}

    def lin(name, d_in, d_out):
        params[f"{name}.w"] = T.param(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        params[f"{name}.b"] = T.param(np.zeros(d_out))

    params["mask_token"] = T.param(np.zeros(INPUT_DIM))
    for s, d_out in enumerate(cfg.stage_dims):
        d_in = _stage_in_dim(cfg, s)
        for i in range(cfg.mlp_depth):
            lin(f"stage{s}.lin{i}", d_in if i == 0 else d_out, d_out)
    lin("proj.lin0", cfg.intra_feature_dim, cfg.proj_dim)
    lin("proj.lin1", cfg.proj_dim, cfg.proj_dim)
    params["proto.w"] = T.param(rng.normal(0.0, 1.0 / np.sqrt(cfg.proj_dim),
                                           size=(cfg.proto_count, cfg.proj_dim)))
    lin("cross", cfg.cross_feature_dim, cfg.cross_dim)
    return params


def clone_params(params: Dict[str, T.Tensor]) -> Dict[str, T.Tensor]:
    """Teacher copy: same values, never tracked by the optimizer or the tape."""
    return {k: T.Tensor(v.data.copy(), requires_grad=False) for k, v in params.items()}


def param_count(params: Dict[str, T.Tensor]) -> int:
    return int(sum(v.size for v in params.values()))


def ema_update(teacher: Dict[str, T.Tensor], student: Dict[str, T.Tensor], m: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s, elementwise, heads included."""
    if teacher.keys() != student.keys():
        raise ValueError("teacher/student parameter sets differ")
    for k, t in teacher.items():
        s = student[k]
        if t.data.shape != s.data.shape:
            raise ValueError(f"shape mismatch for {k}")
        t.data *= m
        t.data += (1.0 - m) * s.data


# ---------------------------------------------------------------------------
# lora
# ---------------------------------------------------------------------------

def make_adapter(weight: T.Tensor, rank: int, alpha: float, dropout: float,
                 rng: np.random.Generator) -> LoraAdapter:
    if weight.data.ndim != 2:
        raise ValueError("lora adapts 2-D weights only")
    d_in, d_out = weight.data.shape
    if rank > min(d_in, d_out):
        raise ValueError(f"rank {rank} exceeds min dim of a {weight.data.shape} weight")
    return LoraAdapter(
        a=T.param(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank))),
        b=T.param(np.zeros((rank, d_out))),
        rank=rank, alpha=alpha, dropout=dropout)


def make_lora_adapters(params: Dict[str, T.Tensor], rank: int = 8, alpha: float = 16.0,
                       dropout: float = 0.1, seed: int = 0,
                       prefixes: tuple = ("stage",)) -> Dict[str, LoraAdapter]:
    """One adapter per matching 2-D weight (the stage MLPs by default).

    Weights narrower than the rank (e.g. the 6-wide input layer) are left
    unadapted; a low-rank update cannot be low-rank there.
    """
    rng = np.random.default_rng([seed, 0x10BA])
    adapters = {}
    for name, p in sorted(params.items()):
        if p.data.ndim != 2 or not name.endswith(".w"):
            continue
        if not any(name.startswith(pre) for pre in prefixes):
            continue
        if rank > min(p.data.shape):
            logger.debug("skipping lora on %s: shape %s below rank %d", name, p.data.shape, rank)
            continue
        adapters[name] = make_adapter(p, rank, alpha, dropout, rng)
    if not adapters:
        raise ValueError(f"no weight is wide enough for lora rank {rank}")
    return adapters


def apply_lora(x: T.Tensor, w: T.Tensor, adapter: LoraAdapter,
               train: bool = False, rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """x @ (W + scaling * A B), with train-time dropout on the adapter path."""
    base = T.op_matmul(x, w)
    h = x
    if train and adapter.dropout > 0:
        if rng is None:
            raise ValueError("training-mode lora dropout needs an rng")
        keep = (rng.random(x.data.shape) >= adapter.dropout) / (1.0 - adapter.dropout)
        h = T.op_mul(h, T.Tensor(keep))
    delta = T.op_matmul(T.op_matmul(h, adapter.a), adapter.b)
    return T.op_add(base, T.op_mul(delta, adapter.scaling))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class EncodeResult:
    coords: List[np.ndarray]    # per-stage point coordinates
    feats: List[T.Tensor]       # per-stage features
    parents: List[np.ndarray]   # parents[s]: P_s -> P_{s+1} voxel membership

    @property
    def num_stages(self) -> int:
        return len(self.feats)

    def ancestors(self, stage: int) -> np.ndarray:
        """Map from P_0 point positions to their stage-``stage`` ancestors."""
        anc = np.arange(self.coords[0].shape[0])
        for s in range(stage):
            anc = self.parents[s][anc]
        return anc


def _linear(x, params, name, adapters, train, rng):
    w = params[f"{name}.w"]
    if adapters is not None and f"{name}.w" in adapters:
        y = apply_lora(x, w, adapters[f"{name}.w"], train=train, rng=rng)
    else:
        y = T.op_matmul(x, w)
    return T.op_add(y, params[f"{name}.b"])


def _stage_block(x, params, cfg, s, adapters, train, rng):
    h = T.op_layernorm(x)
    for i in range(cfg.mlp_depth):
        h = _linear(h, params, f"stage{s}.lin{i}", adapters, train, rng)
        if i < cfg.mlp_depth - 1:
            h = T.op_gelu(h)
    return h


def _local_mix(feats, assignments, num_segments):
    """Half-and-half blend of each point's features with its voxel-neighborhood
    mean; keeps dimensions, adds context."""
    spread = T.op_voxel_smooth(feats, assignments, num_segments)
    return T.op_mul(T.op_add(feats, spread), 0.5)


def encode(view: View, params: Dict[str, T.Tensor], cfg: EncoderConfig,
           adapters: Optional[Dict[str, LoraAdapter]] = None,
           train: bool = False, rng: Optional[np.random.Generator] = None) -> EncodeResult:
    """Per-stage features and parent maps for one view.

    Stage-0 input features are colors concatenated with offsets from the
    finest voxel centroid; masked points' input features are replaced by the
    learned mask token.
    """
    coords0 = view.cloud.coords
    n = coords0.shape[0]
    base_grid = voxelize(coords0, cfg.cell_sizes[0])
    offsets = coords0 - base_grid.centroids[base_grid.assignments]
    raw = np.concatenate([view.cloud.colors, offsets], axis=1)

    x = T.Tensor(raw)
    if view.mask is not None and view.mask.any():
        keep = (~view.mask).astype(np.float64)[:, None] * np.ones((1, INPUT_DIM))
        hole = view.mask.astype(np.float64)[:, None] * np.ones((1, INPUT_DIM))
        token_rows = T.op_gather_rows(T.op_reshape(params["mask_token"], (1, INPUT_DIM)),
                                      np.zeros(n, dtype=np.int64))
        x = T.op_add(T.op_mul(x, T.Tensor(keep)), T.op_mul(token_rows, T.Tensor(hole)))

    coords = [coords0]
    feats = []
    parents = []
    agg_cells = [2.0 * cfg.cell_sizes[min(s, cfg.num_pool_steps - 1)]
                 for s in range(cfg.num_stages)]

    mix = voxelize(coords0, agg_cells[0])
    h = _stage_block(x, params, cfg, 0, adapters, train, rng)
    h = _local_mix(h, mix.assignments, mix.num_voxels)
    feats.append(h)

    for s in range(1, cfg.num_stages):
        # the first pooling grid is the same grid the offsets came from
        grid = base_grid if s == 1 else voxelize(coords[s - 1], cfg.cell_sizes[s - 1])
        parents.append(grid.assignments)
        coords.append(grid.centroids)
        pooled, _ = T.op_segment_mean(feats[s - 1], grid.assignments, grid.num_voxels)
        h = _stage_block(pooled, params, cfg, s, adapters, train, rng)
        mix = voxelize(grid.centroids, agg_cells[s])
        h = _local_mix(h, mix.assignments, mix.num_voxels)
        feats.append(h)

    return EncodeResult(coords=coords, feats=feats, parents=parents)


def upcast(result: EncodeResult, level: int) -> T.Tensor:
    """Concatenate coarse-stage features down to P_{top-level}.

    level 0 returns the coarsest features unchanged; each step gathers the
    running features through the parent map and prepends the finer stage.
    """
    top = result.num_stages - 1
    if not 0 <= level <= top:
        raise ValueError(f"upcast level {level} out of range 0..{top}")
    g = result.feats[top]
    for s in range(top - 1, top - 1 - level, -1):
        g = T.op_concat_lastdim([result.feats[s], T.op_gather_rows(g, result.parents[s])])
    return g


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def proj_head(params: Dict[str, T.Tensor], x: T.Tensor) -> T.Tensor:
    """Two-layer GELU MLP to the prototype space, L2-normalized."""
    h = _linear(x, params, "proj.lin0", None, False, None)
    h = T.op_gelu(h)
    h = _linear(h, params, "proj.lin1", None, False, None)
    return T.op_l2norm(h)


def proto_scores(params: Dict[str, T.Tensor], z: T.Tensor) -> T.Tensor:
    """Prototype logits: z @ W_proto^T."""
    return T.op_matmul(z, T.op_transpose(params["proto.w"]))


def cross_head(params: Dict[str, T.Tensor], x: T.Tensor) -> T.Tensor:
    """Linear map from cross-level point features to the image feature space."""
    return _linear(x, params, "cross", None, False, None)
