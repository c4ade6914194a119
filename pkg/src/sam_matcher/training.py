"""Losses, optimisation and the toy training loops."""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .attention import apply_masks
from .features import COARSE_STRIDE, grid_queries, sample_descriptors
from .model import SAM, SAMConfig, window_scores
from .numeric import GradCheckReport, NumericError, grad_check, seeded_generator
from .geometry import project
from .synthetic import SyntheticPair, TextureParams, covisible, gen_synthetic_pair

log = logging.getLogger(__name__)

# Seed offsets keep training, validation and refiner streams disjoint.
TRAIN_SEED_OFFSET = 0
REFINER_SEED_OFFSET = 500_000
HELDOUT_SEED_OFFSET = 1_000_000
BENCHMARK_SEED_OFFSET = 2_000_000
EXPORT_SEED_OFFSET = 3_000_000


def gt_cells(gt_pixels: torch.Tensor, height: int, width: int, stride: int = COARSE_STRIDE):
    """Flat coarse-cell index of each ground-truth pixel and an in-bounds mask."""
    gt = torch.as_tensor(gt_pixels, dtype=torch.float64)
    col = torch.floor(gt[:, 0] / stride).long()
    row = torch.floor(gt[:, 1] / stride).long()
    ok = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    return row * width + col, ok


def ce_loss(maps: torch.Tensor, gt_pixels, stride: int = COARSE_STRIDE) -> tuple[torch.Tensor, int]:
    """Per-query cross-entropy ``logsumexp(map) - map[gt_cell]``.

    ``maps`` is (L, h, w) or a single (h, w) map. Queries whose ground truth
    falls outside the map are dropped; returns (losses, number skipped).
    """
    if maps.dim() == 2:
        maps = maps[None]
    gt = torch.as_tensor(np.asarray(gt_pixels, dtype=np.float64).reshape(-1, 2))
    if gt.shape[0] != maps.shape[0]:
        raise ValueError("one ground-truth pixel per map expected")
    cells, ok = gt_cells(gt, maps.shape[1], maps.shape[2], stride)
    flat = maps.reshape(maps.shape[0], -1)[ok]
    target = cells[ok]
    losses = torch.logsumexp(flat, dim=1) - flat.gather(1, target[:, None])[:, 0]
    return losses, int((~ok).sum())


def lr_schedule(step: int, warmup: int, peak: float, floor: float, total: int) -> float:
    """Linear warm-up from 0 to ``peak``, then exponential decay reaching
    ``floor`` at step ``total`` (never going below it)."""
    if step < 0:
        raise ValueError("negative step")
    if step <= warmup:
        return peak * step / warmup
    gamma = (floor / peak) ** (1.0 / max(total - warmup, 1))
    return max(floor, peak * gamma ** (step - warmup))


def make_adam(params, lr: float = 0.0) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(optimizer: torch.optim.Optimizer, model: torch.nn.Module, lr: float) -> None:
    """One Adam update followed by re-projection of every structured mask."""
    for group in optimizer.param_groups:
        group["lr"] = lr
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError("non-finite gradient")
    optimizer.step()
    apply_masks(model)


class AblationVariant(str, enum.Enum):
    SIAMESE_CNN = "SiameseCNN"
    INPUT_CA_SA = "+InputCA_SA"
    LEARNED_LV_OUTPUT_CA = "+LearnedLV_OutputCA"
    PE_CONCAT = "+PEConcat"
    STRUCTURED_AM = "+StructuredAM"
    FULL = "Full"

    @classmethod
    def parse(cls, name: str) -> "AblationVariant":
        for v in cls:
            if name in (v.value, v.name, v.name.lower(), v.value.lower()):
                return v
        raise ValueError(f"unknown ablation variant {name!r}")


VARIANTS = list(AblationVariant)


def build_variant(variant, profile: str = "toy", **overrides) -> SAMConfig:
    """Cumulative architecture switches of the ablation ladder."""
    v = AblationVariant.parse(variant) if isinstance(variant, str) else variant
    rank = VARIANTS.index(v)
    cfg = SAMConfig.for_profile(
        profile,
        input_ca=rank >= 1,
        output_ca=rank >= 2,
        pe_mode="concat" if rank >= 3 else "add",
        structured=rank >= 4,
        refine=rank >= 5,
    )
    for k, val in overrides.items():
        setattr(cfg, k, val)
    return cfg


@dataclass
class TrainConfig:
    profile: str = "toy"
    variant: str = AblationVariant.FULL.value
    steps: int = 300
    warmup_steps: int = 50
    lr_peak: float = 1e-3
    lr_floor: float = 1e-3
    refiner_steps: int = 300
    refiner_lr: float = 1e-3
    image_size: int = 64
    query_stride: int = 4
    pairs_per_step: int = 8
    seed: int = 0
    texture: TextureParams = field(default_factory=TextureParams)

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.lr_floor > self.lr_peak:
            raise ValueError("lr_floor must not exceed lr_peak")
        if self.pairs_per_step < 1:
            raise ValueError("pairs_per_step must be >= 1")

    @classmethod
    def for_profile(cls, profile: str, **kw) -> "TrainConfig":
        if profile == "paper":
            base = dict(profile="paper", steps=200_000, warmup_steps=5000, lr_peak=1e-4,
                        lr_floor=1e-5, refiner_lr=1e-3, image_size=640, pairs_per_step=1)
        else:
            base = dict(profile="toy")
        base.update(kw)
        return cls(**base)

    def model_config(self) -> SAMConfig:
        return build_variant(self.variant, self.profile, seed=self.seed)

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.warmup_steps, self.lr_peak, self.lr_floor, self.steps)


def training_pair(config: TrainConfig, index: int, offset: int = TRAIN_SEED_OFFSET) -> SyntheticPair:
    return gen_synthetic_pair(stream_seed(config.seed, offset, index), config.image_size, config.texture)


def heldout_pairs(config: TrainConfig, n: int) -> list[SyntheticPair]:
    return [training_pair(config, i, HELDOUT_SEED_OFFSET) for i in range(n)]


def stream_seed(seed: int, offset: int, index: int) -> int:
    return seed * 10_000_000 + offset + index


def benchmark_pairs(seed: int, n: int, size: int = 64, uniform_patches: int = 3) -> list[SyntheticPair]:
    """Seeded evaluation pairs with flat patches so that texture masking matters."""
    tex = TextureParams(uniform_patches=uniform_patches)
    return [gen_synthetic_pair(stream_seed(seed, BENCHMARK_SEED_OFFSET, i), size, tex) for i in range(n)]


def with_grid_queries(pair: SyntheticPair, stride: int, offset: int = 0) -> SyntheticPair:
    """Copy of ``pair`` supervised at every covisible point of a ``stride`` grid.

    Integer queries inside one coarse cell share a descriptor, so a stride
    of 4 gives one unambiguous query per cell, at the same in-cell position
    as the stride-8 evaluation grid.
    """
    h, w = pair.source.shape[:2]
    q = grid_queries(h, w, stride, offset)
    pt = project(pair.homography, q)
    keep = covisible(pt, (h, w))
    return dataclasses.replace(pair, queries=q[keep], correspondents=pt[keep])


def pair_loss(model: SAM, pair: SyntheticPair) -> torch.Tensor:
    """Mean coarse cross-entropy over the covisible queries of one pair."""
    maps = model(pair.source, pair.target, pair.queries)
    losses, _ = ce_loss(maps, pair.correspondents)
    return losses.mean()


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r[2] for r in self.rows]

    def to_csv(self) -> str:
        lines = ["step,lr,loss"] + [f"{s},{lr:.9g},{loss:.9g}" for s, lr, loss in self.rows]
        return "\n".join(lines) + "\n"


def train_matcher(config: TrainConfig, model: SAM | None = None) -> tuple[SAM, TrainLog]:
    """Adam on the coarse cross-entropy averaged over ``pairs_per_step`` pairs per step."""
    model = SAM(config.model_config()) if model is None else model
    model.train()
    params = model.matcher_parameters()
    opt = make_adam(params)
    history = TrainLog()
    for step in range(config.steps):
        pairs = []
        for k in range(config.pairs_per_step):
            pair = training_pair(config, step * config.pairs_per_step + k)
            if config.query_stride:
                pair = with_grid_queries(pair, config.query_stride)
            if len(pair.queries):
                pairs.append(pair)
        if not pairs:
            continue
        lr = config.lr(step + 1)
        opt.zero_grad(set_to_none=True)
        loss = sum(pair_loss(model, p) for p in pairs) / len(pairs)
        if not torch.isfinite(loss):
            raise NumericError(f"loss became {loss.item()} at step {step}")
        loss.backward()
        adam_step(opt, model, lr)
        history.rows.append((step, lr, loss.item()))
        if step % 50 == 0:
            log.info("matcher step %d lr %.2e loss %.4f", step, lr, loss.item())
    model.eval()
    return model, history


def refiner_loss(model: SAM, pair: SyntheticPair, rng: np.random.Generator) -> torch.Tensor | None:
    """Full-resolution cross-entropy on windows around the true location.

    Window centres are the rounded ground truth moved by up to +-4 px per
    axis, standing in for an imperfect coarse match.
    """
    window = model.config.window
    r = window // 2
    fs = model.fine_features(pair.source)
    ft = model.fine_features(pair.target)
    h, w = ft.shape[:2]
    gt = np.floor(pair.correspondents + 0.5).astype(np.int64)
    gt[:, 0] = np.clip(gt[:, 0], 0, w - 1)
    gt[:, 1] = np.clip(gt[:, 1], 0, h - 1)
    centers = gt + rng.integers(-4, 5, size=gt.shape)
    centers[:, 0] = np.clip(centers[:, 0], 0, w - 1)
    centers[:, 1] = np.clip(centers[:, 1], 0, h - 1)
    inside = np.all(np.abs(gt - centers) <= r, axis=1)
    if not inside.any():
        return None
    desc = sample_descriptors(fs, pair.queries[inside], stride=1)
    c = torch.as_tensor(centers[inside])
    scores, _ = window_scores(desc, ft, c, window)
    t = torch.as_tensor(gt[inside] - centers[inside] + r)
    target = t[:, 1] * window + t[:, 0]
    return F.cross_entropy(scores.reshape(len(c), -1), target)


def train_refiner(config: TrainConfig, model: SAM) -> TrainLog:
    """Train the fine feature network on its own optimiser (constant lr)."""
    if model.refiner is None:
        raise ValueError("model has no refiner")
    model.train()
    opt = make_adam(model.refiner_parameters(), lr=config.refiner_lr)
    rng = np.random.default_rng(config.seed + REFINER_SEED_OFFSET)
    history = TrainLog()
    for step in range(config.refiner_steps):
        pair = training_pair(config, step, REFINER_SEED_OFFSET)
        opt.zero_grad(set_to_none=True)
        loss = refiner_loss(model, pair, rng)
        if loss is None:
            continue
        if not torch.isfinite(loss):
            raise NumericError(f"refiner loss became {loss.item()} at step {step}")
        loss.backward()
        adam_step(opt, model, config.refiner_lr)
        history.rows.append((step, config.refiner_lr, loss.item()))
    model.eval()
    return history


def train(config: TrainConfig, stage: str = "both") -> tuple[SAM, TrainLog, TrainLog]:
    """Refiner first (when present), then the matcher."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SAM(config.model_config())
        ref_log, match_log = TrainLog(), TrainLog()
        if stage in ("both", "refiner") and model.refiner is not None:
            ref_log = train_refiner(config, model)
        if stage in ("both", "matcher"):
            model, match_log = train_matcher(config, model)
    return model, match_log, ref_log


def mean_loss(model: SAM, pairs: list[SyntheticPair]) -> float:
    with torch.no_grad():
        vals = [pair_loss(model, p).item() for p in pairs if len(p.queries)]
    return float(np.mean(vals)) if vals else math.nan


def gradcheck_model(
    seed: int = 0,
    image_size: int = 16,
    samples_per_group: int | None = 16,
    eps: float = 1e-6,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Central-difference check of the full toy matcher loss in float64.

    Every matcher parameter is its own group. ``corrupt`` names a group
    whose backward gradient is deliberately scaled, to show the check fails.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SAM(SAMConfig.toy(seed=seed, refine=False)).double()
    pair = with_grid_queries(gen_synthetic_pair(seed, image_size), COARSE_STRIDE)
    params = {n: p for n, p in model.named_parameters()}
    if corrupt is not None:
        if corrupt not in params:
            raise KeyError(f"unknown parameter group {corrupt!r}")
        params[corrupt].register_hook(lambda g: g * 1.5 + 1e-3)
    return grad_check(
        lambda: pair_loss(model, pair),
        params,
        eps=eps,
        samples_per_group=samples_per_group,
        generator=seeded_generator(seed),
    )
