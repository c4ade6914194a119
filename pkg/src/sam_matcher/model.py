"""The matcher: features -> latent attention -> correspondence maps -> matches."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import AttentionBlock, apply_masks
from .features import (
    COARSE_STRIDE,
    CoarseExtractor,
    FineExtractor,
    PositionalEncoding,
    as_query_tensor,
    check_divisible,
    concat_features,
    sample_descriptors,
    to_batch,
)
from .numeric import ShapeError

REFINE_WINDOW = 11


@dataclass
class SAMConfig:
    """Architecture switches. Defaults are the full-size configuration."""

    profile: str = "paper"
    backbone: str = "paper"
    feat_dim: int = 128
    heads: int = 8
    n_latents: int = 128
    n_self: int = 16
    pe_mode: str = "concat"  # or "add"
    structured: bool = True
    input_ca: bool = True
    output_ca: bool = True
    refine: bool = True
    fine_dim: int = 128
    pe_hidden: int = 64
    window: int = REFINE_WINDOW
    seed: int = 0

    @property
    def d_model(self) -> int:
        return 2 * self.feat_dim if self.pe_mode == "concat" else self.feat_dim

    @classmethod
    def paper(cls, **kw) -> "SAMConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "SAMConfig":
        base = dict(profile="toy", backbone="toy", feat_dim=16, heads=4, n_latents=8,
                    n_self=2, fine_dim=32)
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_profile(cls, profile: str, **kw) -> "SAMConfig":
        if profile == "toy":
            return cls.toy(**kw)
        if profile == "paper":
            return cls.paper(**kw)
        raise ValueError(f"unknown profile {profile!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SAMConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class SAM(nn.Module):
    def __init__(self, config: SAMConfig):
        super().__init__()
        if config.pe_mode not in ("concat", "add"):
            raise ValueError(f"unknown pe_mode {config.pe_mode!r}")
        self.config = c = config
        d = c.d_model
        s = c.seed * 1000
        self.extractor = _seeded(s + 1, lambda: CoarseExtractor(c.backbone, c.feat_dim))
        self.pe = _seeded(s + 2, lambda: PositionalEncoding(c.feat_dim, c.pe_hidden))
        m = c.n_latents if c.output_ca else 0
        self.latents = nn.Parameter(_seeded(s + 3, lambda: torch.randn(m, d)))
        self.input_block = None
        self.self_blocks = nn.ModuleList()
        self.output_block = None
        if c.input_ca:
            self.input_block = _seeded(s + 4, lambda: AttentionBlock(d, c.heads, c.structured))
            self.self_blocks = _seeded(s + 5, lambda: nn.ModuleList(
                AttentionBlock(d, c.heads, c.structured) for _ in range(c.n_self)))
        if c.output_ca:
            self.output_block = _seeded(s + 6, lambda: AttentionBlock(d, c.heads, c.structured, "output"))
        self.refiner = None
        if c.refine:
            self.refiner = _seeded(s + 7, lambda: FineExtractor(c.backbone, c.fine_dim, c.feat_dim))
        apply_masks(self)

    @property
    def n_latents(self) -> int:
        return self.latents.shape[0]

    def matcher_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("refiner.")]

    def refiner_parameters(self):
        return [] if self.refiner is None else list(self.refiner.parameters())

    def init_backbone_from_refiner(self) -> None:
        """Copy the refiner's backbone weights into the coarse extractor."""
        if self.refiner is None:
            raise ValueError("model has no refiner")
        self.extractor.backbone.load_state_dict(self.refiner.backbone.state_dict())

    # -- features -----------------------------------------------------------------

    def visual_features(self, image) -> torch.Tensor:
        """(h, w, feat_dim) stride-4 visual features."""
        batch = to_batch(image).to(self.latents.dtype)
        return self.extractor(batch)[0].permute(1, 2, 0)

    def encode(self, image) -> torch.Tensor:
        """(h, w, D) grid of visual features combined with positional encodings."""
        f = self.visual_features(image)
        pe = self.pe(f.shape[0], f.shape[1])
        return concat_features(f, pe) if self.config.pe_mode == "concat" else f + pe

    def fine_features(self, image) -> torch.Tensor:
        if self.refiner is None:
            raise ValueError("model has no refiner")
        batch = to_batch(image).to(self.latents.dtype)
        return self.refiner(batch)[0].permute(1, 2, 0)

    # -- latent stage -------------------------------------------------------------

    def input_cross_attention(self, latents: torch.Tensor, ht_flat: torch.Tensor) -> torch.Tensor:
        if ht_flat.shape[0] == 0:
            raise ShapeError("empty target grid")
        return self.input_block(latents, ht_flat)

    def self_attention_stack(self, latents: torch.Tensor, n_layers: int | None = None) -> torch.Tensor:
        blocks = self.self_blocks if n_layers is None else self.self_blocks[:n_layers]
        for block in blocks:
            latents = block(latents, latents)
        return latents

    def output_cross_attention(self, ht_flat: torch.Tensor, latents: torch.Tensor) -> torch.Tensor:
        return self.output_block(ht_flat, latents)

    def latent_stage(self, descriptors: torch.Tensor, ht_flat: torch.Tensor):
        """Returns (learned latents out, query descriptors out, target grid out)."""
        m = self.n_latents
        lat = torch.cat([self.latents, descriptors], dim=0)
        if self.input_block is not None:
            lat = self.input_cross_attention(lat, ht_flat)
            lat = self.self_attention_stack(lat)
        ht_out = ht_flat if self.output_block is None else self.output_cross_attention(ht_flat, lat)
        return lat[:m], lat[m:], ht_out

    def maps_from_encodings(self, hs: torch.Tensor, ht: torch.Tensor, queries) -> torch.Tensor:
        """(L, h_t, w_t) correspondence maps for the given integer source queries."""
        desc = sample_descriptors(hs, queries)
        _, q_out, ht_out = self.latent_stage(desc, ht.reshape(-1, ht.shape[-1]))
        return (q_out @ ht_out.T).reshape(-1, ht.shape[0], ht.shape[1])

    def forward(self, source, target, queries) -> torch.Tensor:
        return self.maps_from_encodings(self.encode(source), self.encode(target), queries)


# -- maps and matching -----------------------------------------------------------------


def correspondence_map(descriptor: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """scores[r, c] = <descriptor, grid[r, c]>."""
    if descriptor.shape[-1] != grid.shape[-1]:
        raise ShapeError("descriptor / grid channel mismatch")
    return grid @ descriptor


def split_correspondence_maps(descriptor: torch.Tensor, grid: torch.Tensor):
    """(visio-positional map, positional map) from the two channel halves."""
    half = grid.shape[-1] // 2
    return (grid[..., :half] @ descriptor[:half], grid[..., half:] @ descriptor[half:])


def cell_to_pixel(row: int, col: int, stride: int = COARSE_STRIDE) -> tuple[float, float]:
    """Centre (x, y) of a coarse cell in source pixels."""
    off = (stride - 1) / 2
    return stride * col + off, stride * row + off


def coarse_match(cmap) -> tuple[tuple[float, float], float]:
    """Row-major first argmax of a map, as a cell-centre pixel and its score."""
    a = np.asarray(cmap.detach() if isinstance(cmap, torch.Tensor) else cmap)
    if a.size == 0:
        raise ShapeError("empty correspondence map")
    k = int(np.argmax(a))
    r, c = divmod(k, a.shape[1])
    return cell_to_pixel(r, c), float(a[r, c])


def window_center(coarse_xy, width: int, height: int) -> tuple[int, int]:
    cx = min(max(int(np.floor(coarse_xy[0] + 0.5)), 0), width - 1)
    cy = min(max(int(np.floor(coarse_xy[1] + 0.5)), 0), height - 1)
    return cx, cy


def refine(query, fine_src, fine_tgt, coarse_xy, window: int = REFINE_WINDOW) -> tuple[int, int]:
    """Argmax of <fine_src[query], fine_tgt[p]> over a window around the coarse match.

    The window is centred on the rounded coarse prediction and clipped to
    the image, so it may be smaller than ``window x window`` at borders.
    """
    fs = np.asarray(fine_src.detach() if isinstance(fine_src, torch.Tensor) else fine_src)
    ft = np.asarray(fine_tgt.detach() if isinstance(fine_tgt, torch.Tensor) else fine_tgt)
    h, w = ft.shape[:2]
    r = window // 2
    cx, cy = window_center(coarse_xy, w, h)
    x0, x1 = max(cx - r, 0), min(cx + r, w - 1)
    y0, y1 = max(cy - r, 0), min(cy + r, h - 1)
    scores = ft[y0 : y1 + 1, x0 : x1 + 1] @ fs[int(query[1]), int(query[0])]
    k = int(np.argmax(scores))
    dy, dx = divmod(k, scores.shape[1])
    return x0 + dx, y0 + dy


def window_scores(desc: torch.Tensor, fine_tgt: torch.Tensor, centers: torch.Tensor, window: int = REFINE_WINDOW):
    """Batched window maps.

    ``centers`` is (L, 2) integer (x, y). Returns scores (L, window, window)
    with -inf outside the image, and the pixel coordinates of every window
    cell as (L, window, window, 2).
    """
    h, w = fine_tgt.shape[:2]
    r = window // 2
    off = torch.arange(-r, r + 1)
    xs = centers[:, 0, None, None] + off[None, None, :]
    ys = centers[:, 1, None, None] + off[None, :, None]
    xs, ys = torch.broadcast_tensors(xs, ys)
    valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    feats = fine_tgt[ys.clamp(0, h - 1), xs.clamp(0, w - 1)]
    scores = torch.einsum("lijc,lc->lij", feats, desc)
    scores = scores.masked_fill(~valid, float("-inf"))
    return scores, torch.stack([xs, ys], dim=-1)


@dataclass
class MatchRecord:
    query: tuple[int, int]
    coarse: tuple[float, float]
    refined: tuple[float, float]
    score: float

    @property
    def prediction(self) -> tuple[float, float]:
        return self.refined


@dataclass
class PairCache:
    hs: torch.Tensor
    ht: torch.Tensor
    fine_s: torch.Tensor | None = None
    fine_t: torch.Tensor | None = None
    size_t: tuple[int, int] = field(default=(0, 0))  # (height, width)


def prepare_pair(model: SAM, source, target, with_fine: bool = True) -> PairCache:
    src, tgt = np.asarray(source), np.asarray(target)
    check_divisible(*src.shape[:2])
    check_divisible(*tgt.shape[:2])
    cache = PairCache(model.encode(src), model.encode(tgt), size_t=tgt.shape[:2])
    if with_fine and model.refiner is not None:
        cache.fine_s = model.fine_features(src)
        cache.fine_t = model.fine_features(tgt)
    return cache


@torch.no_grad()
def match_batch(model: SAM, cache: PairCache, queries: np.ndarray, coarse_only: bool = False) -> list[MatchRecord]:
    maps = model.maps_from_encodings(cache.hs, cache.ht, queries)
    records = []
    for q, cmap in zip(queries, maps):
        coarse, score = coarse_match(cmap)
        refined = coarse
        if not coarse_only and cache.fine_s is not None:
            refined = tuple(float(v) for v in refine(q, cache.fine_s, cache.fine_t, coarse, model.config.window))
        records.append(MatchRecord((int(q[0]), int(q[1])), coarse, refined, score))
    return records


@torch.no_grad()
def match_pair(
    model: SAM,
    source,
    target,
    queries,
    batch_size: int = 1024,
    shuffle_seed: int | None = None,
    coarse_only: bool = False,
    cache: PairCache | None = None,
) -> list[MatchRecord]:
    """Match integer source queries into the target, ``batch_size`` at a time.

    CNN and positional features are computed once per pair. With
    ``shuffle_seed`` the queries are permuted before batching, which only
    matters when self-attention couples queries of the same batch. Records
    come back in input order.
    """
    q = as_query_tensor(queries).numpy()
    if len(q) == 0:
        raise ValueError("no queries")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if cache is None:
        cache = prepare_pair(model, source, target, with_fine=not coarse_only)
    order = np.arange(len(q))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(q))
    out: list[MatchRecord | None] = [None] * len(q)
    for start in range(0, len(q), batch_size):
        idx = order[start : start + batch_size]
        for i, rec in zip(idx, match_batch(model, cache, q[idx], coarse_only)):
            out[i] = rec
    return out


@torch.no_grad()
def average_latent_map(model: SAM, source, target, queries=None) -> np.ndarray:
    """Mean correspondence map of the learned latent vectors (debug view)."""
    if model.n_latents == 0:
        raise ValueError("model has no learned latents")
    hs, ht = model.encode(source), model.encode(target)
    if queries is None:
        from .features import grid_queries
        queries = grid_queries(np.asarray(source).shape[0], np.asarray(source).shape[1])
    desc = sample_descriptors(hs, queries)
    m_out, _, ht_out = model.latent_stage(desc, ht.reshape(-1, ht.shape[-1]))
    maps = m_out @ ht_out.T
    return maps.mean(dim=0).reshape(ht.shape[0], ht.shape[1]).numpy()


def render_map(cmap: np.ndarray) -> np.ndarray:
    """Min-max normalise a map to uint8 [0, 255]."""
    a = np.asarray(cmap, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)
