"""Seeded synthetic training/evaluation pairs related by a known homography."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .features import check_divisible, grid_queries
from .geometry import dlt, project

FILL_VALUE = 0.5


@dataclass
class TextureParams:
    sigmas: tuple[float, ...] = (1.0, 2.5)
    weights: tuple[float, ...] = (1.0, 0.6)
    uniform_patches: int = 0
    patch_size: tuple[int, int] = (10, 20)
    max_jitter: float = 0.15


@dataclass
class SyntheticPair:
    source: np.ndarray  # (H, W, 3) float32 in [0, 1]
    target: np.ndarray
    homography: np.ndarray  # maps source pixels to target pixels
    queries: np.ndarray  # (L, 2) int, stride-8 grid, covisible only
    correspondents: np.ndarray  # (L, 2) float, H applied to queries
    seed: int = 0
    all_queries: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))


def random_texture(rng: np.random.Generator, size: tuple[int, int], params: TextureParams) -> np.ndarray:
    """Band-limited colour noise, contrast-stretched into [0, 1]."""
    h, w = size
    img = np.zeros((h, w, 3))
    for sigma, weight in zip(params.sigmas, params.weights):
        noise = rng.standard_normal((h, w, 3))
        smooth = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="reflect")
        img += weight * smooth / (smooth.std() + 1e-12)
    lo, hi = np.percentile(img, 1), np.percentile(img, 99)
    img = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    for _ in range(params.uniform_patches):
        ph, pw = rng.integers(params.patch_size[0], params.patch_size[1] + 1, size=2)
        y, x = rng.integers(0, h - ph + 1), rng.integers(0, w - pw + 1)
        img[y : y + ph, x : x + pw] = rng.random(3)
    return img


def random_homography(rng: np.random.Generator, size: tuple[int, int], max_jitter: float) -> np.ndarray:
    """Perspective perturbation of the identity: each corner moves by at most
    ``max_jitter * size`` per axis. Degenerate (non-convex / flipped) draws are
    resampled."""
    h, w = size
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    scale = np.array([w, h], dtype=np.float64) * max_jitter
    while True:
        moved = corners + rng.uniform(-1, 1, size=(4, 2)) * scale
        if _convex_same_orientation(moved):
            H = dlt(corners, moved)
            if np.isfinite(H).all() and abs(np.linalg.det(H)) > 1e-8:
                return H


def _convex_same_orientation(quad: np.ndarray) -> bool:
    crosses = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        u, v = b - a, c - b
        crosses.append(u[0] * v[1] - u[1] * v[0])
    return all(c > 0 for c in crosses)


def warp_image(image: np.ndarray, H: np.ndarray, fill: float = FILL_VALUE) -> np.ndarray:
    """Target(p) = source(H^-1 p) with bilinear sampling; outside is ``fill``."""
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = project(np.linalg.inv(H), pts)
    coords = [src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)]
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.map_coordinates(image[..., c], coords, order=1, mode="constant", cval=fill)
    return out


def covisible(points: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    x, y = points[:, 0], points[:, 1]
    return (x >= 0) & (x < w) & (y >= 0) & (y < h)


def gen_synthetic_pair(
    seed: int,
    size: int | tuple[int, int] = 64,
    texture: TextureParams | None = None,
    homography: np.ndarray | None = None,
    stride: int = 8,
) -> SyntheticPair:
    """Random texture, random (or given) homography, warped target, grid truth."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    check_divisible(*size)
    texture = TextureParams() if texture is None else texture
    rng = np.random.default_rng(seed)
    source = random_texture(rng, size, texture)
    if homography is None:
        H = random_homography(rng, size, texture.max_jitter)
    else:
        H = np.asarray(homography, dtype=np.float64)
    target = warp_image(source, H)
    q = grid_queries(size[0], size[1], stride)
    pt = project(H, q)
    keep = covisible(pt, size)
    return SyntheticPair(
        source=source.astype(np.float32),
        target=target.astype(np.float32),
        homography=H,
        queries=q[keep],
        correspondents=pt[keep],
        seed=seed,
        all_queries=q,
    )
