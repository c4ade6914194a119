"""Siamese CNN features, positional encodings and descriptor sampling.

Grids handed to the attention stage are channels-last ``(h, w, C)`` with
channels ``[0, C/2)`` visual and ``[C/2, C)`` positional when the encodings
are concatenated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numeric import ShapeError

COARSE_STRIDE = 4


class ImageShapeError(ShapeError):
    """Image dimensions are incompatible with the stride-4 grid."""


@dataclass
class FeatureGrid:
    data: torch.Tensor  # (h, w, C)
    stride: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def flat(self) -> torch.Tensor:
        return self.data.reshape(-1, self.channels)


def to_batch(image) -> torch.Tensor:
    """HxWx3 array in [0, 1] -> (1, 3, H, W) float tensor."""
    t = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if t.dim() != 3 or t.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got {tuple(t.shape)}")
    return t.permute(2, 0, 1)[None].to(torch.get_default_dtype())


def check_divisible(h: int, w: int, factor: int = COARSE_STRIDE) -> None:
    if h % factor or w % factor:
        raise ImageShapeError(
            f"image size {h}x{w} is not divisible by {factor}; pad it to a multiple of {factor}"
        )


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ToyBackbone(nn.Module):
    """Four 3x3 conv blocks, stride-2 in blocks 2 and 3, no activation at the end."""

    def __init__(self, out_channels: int = 128, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        c1, c2, c3 = widths
        self.block1 = conv3x3(3, c1)
        self.block2 = conv3x3(c1, c2, stride=2)
        self.block3 = conv3x3(c2, c3, stride=2)
        self.block4 = conv3x3(c3, out_channels)
        self.out_channels = out_channels
        self.level_channels = [c1, c2, out_channels]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[tuple[torch.Tensor, int]]]:
        f1 = F.relu(self.block1(x))
        f2 = F.relu(self.block2(f1))
        f3 = self.block4(F.relu(self.block3(f2)))
        return f3, [(f1, 1), (f2, 2), (f3, 4)]


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, last_relu: bool = True):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.norm1 = nn.GroupNorm(8, cout)
        self.conv2 = conv3x3(cout, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.last_relu = last_relu
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride), nn.GroupNorm(8, cout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        out = out + (x if self.shortcut is None else self.shortcut(x))
        return F.relu(out) if self.last_relu else out


class ResNetBackbone(nn.Module):
    """ResNet-18 stem and first two stages, strided in the stem and stage 2.

    Output is 1/4 resolution; the final ReLU of the last block is dropped.
    GroupNorm replaces BatchNorm so that each image is normalised on its own.
    """

    def __init__(self, out_channels: int = 128):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, 64, 7, stride=2, padding=3), nn.GroupNorm(8, 64), nn.ReLU())
        self.layer1 = nn.Sequential(BasicBlock(64, 64), BasicBlock(64, 64))
        self.layer2 = nn.Sequential(BasicBlock(64, out_channels, stride=2),
                                    BasicBlock(out_channels, out_channels, last_relu=False))
        self.out_channels = out_channels
        self.level_channels = [64, 64, out_channels]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[tuple[torch.Tensor, int]]]:
        s = self.stem(x)
        l1 = self.layer1(s)
        l2 = self.layer2(l1)
        return l2, [(s, 2), (l1, 2), (l2, 4)]


def make_backbone(topology: str, out_channels: int) -> nn.Module:
    if topology == "toy":
        return ToyBackbone(out_channels)
    if topology == "paper":
        return ResNetBackbone(out_channels)
    raise ValueError(f"unknown backbone topology {topology!r}")


class FPN(nn.Module):
    """Top-down pathway from the coarsest level to full resolution.

    ``top = lateral[-1](coarse)``; for each finer level, ``top`` is
    bilinearly upsampled to that level's size and the level's lateral
    projection is added; a last upsample brings it to full resolution and a
    3x3 conv produces the output.
    """

    def __init__(self, level_channels: list[int], out_channels: int):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in level_channels)
        self.head = conv3x3(out_channels, out_channels)

    def forward(self, levels: list[tuple[torch.Tensor, int]], size: tuple[int, int]) -> torch.Tensor:
        top = self.laterals[-1](levels[-1][0])
        for (feat, _), lateral in zip(reversed(levels[:-1]), reversed(self.laterals[:-1])):
            top = F.interpolate(top, size=feat.shape[-2:], mode="bilinear", align_corners=False)
            top = top + lateral(feat)
        if tuple(top.shape[-2:]) != tuple(size):
            top = F.interpolate(top, size=size, mode="bilinear", align_corners=False)
        return self.head(top)


class CoarseExtractor(nn.Module):
    def __init__(self, topology: str = "paper", channels: int = 128):
        super().__init__()
        self.backbone = make_backbone(topology, channels)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        check_divisible(*batch.shape[-2:])
        return self.backbone(batch)[0]


class FineExtractor(nn.Module):
    """Backbone plus FPN giving full-resolution features for refinement."""

    def __init__(self, topology: str = "paper", channels: int = 128, backbone_channels: int = 128):
        super().__init__()
        self.backbone = make_backbone(topology, backbone_channels)
        self.fpn = FPN(self.backbone.level_channels, channels)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        check_divisible(*batch.shape[-2:])
        _, levels = self.backbone(batch)
        return self.fpn(levels, tuple(batch.shape[-2:]))


def extract_coarse_features(extractor: CoarseExtractor, image) -> FeatureGrid:
    out = extractor(to_batch(image))
    return FeatureGrid(out[0].permute(1, 2, 0), stride=COARSE_STRIDE)


def extract_fine_features(extractor: FineExtractor, image) -> FeatureGrid:
    out = extractor(to_batch(image))
    return FeatureGrid(out[0].permute(1, 2, 0), stride=1)


def normalized_cell_centers(h: int, w: int) -> torch.Tensor:
    """(h, w, 2) grid of (x, y) cell centres mapped to [-1, 1]."""
    if h < 1 or w < 1:
        raise ShapeError("grid must have at least one cell")
    ys = (torch.arange(h, dtype=torch.get_default_dtype()) + 0.5) / h * 2 - 1
    xs = (torch.arange(w, dtype=torch.get_default_dtype()) + 0.5) / w * 2 - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


class PositionalEncoding(nn.Module):
    """MLP 2 -> hidden -> channels applied to normalised cell centres."""

    def __init__(self, channels: int = 128, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(2, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(coords)))

    def forward(self, h_cells: int, w_cells: int) -> torch.Tensor:
        coords = normalized_cell_centers(h_cells, w_cells).to(self.fc1.weight.dtype)
        return self.encode(coords)


def positional_encoding(pe: PositionalEncoding, h_cells: int, w_cells: int) -> FeatureGrid:
    return FeatureGrid(pe(h_cells, w_cells), stride=COARSE_STRIDE)


def concat_features(visual: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Channels-last concatenation: visual first, positional second."""
    if visual.shape[:-1] != pos.shape[:-1]:
        raise ShapeError(f"spatial mismatch {tuple(visual.shape)} vs {tuple(pos.shape)}")
    return torch.cat([visual, pos], dim=-1)


def as_query_tensor(queries) -> torch.Tensor:
    q = torch.as_tensor(np.asarray(queries, dtype=np.int64).reshape(-1, 2))
    return q


def sample_descriptors(grid: torch.Tensor, queries, stride: int = COARSE_STRIDE) -> torch.Tensor:
    """Descriptor of integer pixel (x, y) is ``grid[y // stride, x // stride]``."""
    q = as_query_tensor(queries)
    if q.numel() and ((q < 0).any() or (q[:, 0] // stride >= grid.shape[1]).any()
                      or (q[:, 1] // stride >= grid.shape[0]).any()):
        raise IndexError("query outside the feature grid")
    return grid[q[:, 1] // stride, q[:, 0] // stride]


def grid_queries(height: int, width: int, stride: int = 8, offset: int = 0) -> np.ndarray:
    """Integer (x, y) source locations on a stride grid starting at ``offset``, row-major."""
    ys, xs = np.mgrid[offset:height:stride, offset:width:stride]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.int64)
