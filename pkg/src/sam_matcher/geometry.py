"""Planar homographies: projection, normalised DLT and RANSAC."""
from __future__ import annotations

import numpy as np


class DegenerateError(ValueError):
    """Not enough well-conditioned correspondences to fit a homography."""


def project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H, dtype=np.float64).T
    return hom[:, :2] / hom[:, 2:3]


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity taking points to zero mean and mean distance sqrt(2)."""
    c = pts.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(pts - c, axis=-1).mean(axis=-1)
    s = np.sqrt(2) / np.maximum(d, 1e-12)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T


def _apply(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ np.swapaxes(T[..., :2, :2], -1, -2) + T[..., None, :2, 2]


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalised DLT; works on (n, 2) point sets or stacks (b, n, 2).

    Returns H with ``H[2, 2] == 1`` (mapping ``src`` to ``dst``).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[-2] < 4:
        raise DegenerateError("DLT needs at least 4 matching points")
    Ts, Td = _normalizer(src), _normalizer(dst)
    a, b = _apply(Ts, src), _apply(Td, dst)
    x, y = a[..., 0], a[..., 1]
    u, v = b[..., 0], b[..., 1]
    zero, one = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    A = np.concatenate([r1, r2], axis=-2)
    _, _, vt = np.linalg.svd(A)
    Hn = vt[..., -1, :].reshape(src.shape[:-2] + (3, 3))
    H = np.linalg.inv(Td) @ Hn @ Ts
    with np.errstate(divide="ignore", invalid="ignore"):
        return H / H[..., 2:3, 2:3]


def _collinear(p: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """True for 4-point samples (b, 4, 2) containing a collinear triple."""
    bad = np.zeros(p.shape[0], dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u, v = p[:, j] - p[:, i], p[:, k] - p[:, i]
        area = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        scale = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        bad |= area <= tol * np.maximum(scale, 1e-12)
    return bad


def reprojection_errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.linalg.norm(project(H, src) - dst, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def estimate_homography(
    src,
    dst,
    ransac_iters: int = 2000,
    inlier_tol: float = 3.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC over 4-point DLT fits, then a DLT re-fit on the best inlier set.

    Returns ``(H, inlier_mask)``; a point is an inlier when its reprojection
    error is at most ``inlier_tol`` pixels.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise DegenerateError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    samples = np.argsort(rng.random((ransac_iters, n)), axis=1)[:, :4]
    ok = ~(_collinear(src[samples]) | _collinear(dst[samples]))
    if not ok.any():
        raise DegenerateError("every RANSAC sample was degenerate")
    samples = samples[ok]
    Hs = dlt(src[samples], dst[samples])
    finite = np.isfinite(Hs).all(axis=(1, 2))
    if not finite.any():
        raise DegenerateError("no finite minimal-sample homography")
    Hs = Hs[finite]
    hom = np.concatenate([src, np.ones((n, 1))], axis=1)
    proj = np.einsum("bij,nj->bni", Hs, hom)
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(proj[..., :2] / proj[..., 2:3] - dst[None], axis=-1)
    err = np.where(np.isfinite(err), err, np.inf)
    counts = (err <= inlier_tol).sum(axis=1)
    # first best sample wins ties
    best = int(np.argmax(counts))
    inliers = err[best] <= inlier_tol
    if inliers.sum() < 4:
        raise DegenerateError("fewer than 4 inliers")
    H = dlt(src[inliers], dst[inliers])
    if not np.isfinite(H).all():
        raise DegenerateError("inlier re-fit is not finite")
    return H, reprojection_errors(H, src, dst) <= inlier_tol


def corner_error(H_est: np.ndarray | None, H_gt: np.ndarray, width: int, height: int) -> float:
    """Mean distance between the image corners mapped by the two homographies."""
    if H_est is None or not np.isfinite(H_est).all():
        return float("inf")
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.linalg.norm(project(H_est, corners) - project(H_gt, corners), axis=1).mean()
    return float(e) if np.isfinite(e) else float("inf")
