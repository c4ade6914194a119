"""Matching accuracy, textured-region accuracy, MNN filtering, homography AUC and reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import DegenerateError, corner_error, estimate_homography
from .model import MatchRecord, match_pair

REPORT_SCHEMA_VERSION = 1
DEFAULT_ETAS = (1, 2, 3, 5, 10, 20)
DEFAULT_AUC_THRESHOLDS = (3, 5, 10)
TEXTURE_PATCH = 8
TEXTURE_TAU = 0.05
LUMA = np.array([0.299, 0.587, 0.114])


class EvalSchemaError(ValueError):
    """Predictions and ground truth do not describe the same queries."""


@dataclass
class EvalPair:
    pair_id: str
    queries: np.ndarray  # (L, 2) integer source pixels
    predictions: np.ndarray  # (L, 2)
    ground_truth: np.ndarray  # (L, 2)
    source: np.ndarray | None = None  # (H, W, 3) or (H, W) in [0, 1]

    def __post_init__(self):
        self.queries = np.asarray(self.queries).reshape(-1, 2)
        self.predictions = np.asarray(self.predictions, dtype=np.float64).reshape(-1, 2)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64).reshape(-1, 2)
        if not (len(self.queries) == len(self.predictions) == len(self.ground_truth)):
            raise EvalSchemaError(f"pair {self.pair_id}: predictions and ground truth differ in length")

    @property
    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.predictions - self.ground_truth, axis=1)


def matching_accuracy(pairs: Sequence[EvalPair], eta: float) -> float:
    """Mean over pairs of the fraction of predictions strictly closer than ``eta``."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    ratios = []
    for p in pairs:
        if len(p.queries) == 0:
            raise ValueError(f"pair {p.pair_id} has no ground-truth correspondences")
        ratios.append(np.mean(p.distances < eta))
    return float(np.mean(ratios))


def to_gray(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    return a if a.ndim == 2 else a[..., :3] @ LUMA


@dataclass
class TextureMask:
    textured: np.ndarray  # bool per query
    patch: int = TEXTURE_PATCH
    tau: float = TEXTURE_TAU


def texture_mask(image: np.ndarray, queries, patch: int = TEXTURE_PATCH, tau: float = TEXTURE_TAU) -> TextureMask:
    """Grayscale standard deviation over a ``patch`` x ``patch`` window.

    The window starts ``patch // 2`` pixels before the query and is shifted
    to stay inside the image.
    """
    gray = to_gray(image)
    h, w = gray.shape
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
    ph, pw = min(patch, h), min(patch, w)
    out = np.zeros(len(q), dtype=bool)
    for i, (x, y) in enumerate(q):
        x0 = min(max(x - patch // 2, 0), w - pw)
        y0 = min(max(y - patch // 2, 0), h - ph)
        out[i] = gray[y0 : y0 + ph, x0 : x0 + pw].std() >= tau
    return TextureMask(out, patch, tau)


def restrict_to_textured(
    pairs: Sequence[EvalPair], patch: int = TEXTURE_PATCH, tau: float = TEXTURE_TAU
) -> tuple[list[EvalPair], int]:
    """Pairs reduced to their textured queries, and the number of pairs dropped as empty."""
    kept, dropped = [], 0
    for p in pairs:
        if p.source is None:
            raise ValueError(f"pair {p.pair_id} has no source image for the texture mask")
        m = texture_mask(p.source, p.queries, patch, tau).textured
        if not m.any():
            dropped += 1
            continue
        kept.append(EvalPair(p.pair_id, p.queries[m], p.predictions[m], p.ground_truth[m], p.source))
    return kept, dropped


def matching_accuracy_textured(
    pairs: Sequence[EvalPair], eta: float, patch: int = TEXTURE_PATCH, tau: float = TEXTURE_TAU
) -> tuple[float, int]:
    """MA restricted to textured queries; returns (value, pairs dropped).

    Pairs with no textured query leave the average. If every pair is
    dropped the value is NaN.
    """
    kept, dropped = restrict_to_textured(pairs, patch, tau)
    if not kept:
        return float("nan"), dropped
    return matching_accuracy(kept, eta), dropped


def mnn_filter(
    model,
    source,
    target,
    records: Sequence[MatchRecord],
    delta: float = 5.0,
    snap: int = 1,
    coarse_only: bool = False,
) -> list[MatchRecord]:
    """Keep the records whose prediction maps back to within ``delta`` of the query.

    Each prediction is rounded to a multiple of ``snap`` pixels (clipped to
    the target), matched back from the target into the source, and compared
    with the original query.
    """
    if not records:
        return []
    tgt = np.asarray(target)
    h, w = tgt.shape[:2]
    pred = np.array([r.prediction if not coarse_only else r.coarse for r in records], dtype=np.float64)
    back_q = np.floor(pred / snap + 0.5).astype(np.int64) * snap
    back_q[:, 0] = np.clip(back_q[:, 0], 0, w - 1)
    back_q[:, 1] = np.clip(back_q[:, 1], 0, h - 1)
    back = match_pair(model, target, source, back_q, coarse_only=coarse_only)
    roundtrip = np.array([b.prediction if not coarse_only else b.coarse for b in back])
    query = np.array([r.query for r in records], dtype=np.float64)
    keep = np.linalg.norm(roundtrip - query, axis=1) <= delta
    return [r for r, k in zip(records, keep) if k]


def auc_from_errors(errors: Iterable[float], thresholds=DEFAULT_AUC_THRESHOLDS) -> dict[float, float]:
    """AUC@t = mean over pairs of max(0, 1 - err / t); infinite errors count as zero."""
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise ValueError("no homography errors")
    out = {}
    for t in thresholds:
        if t <= 0:
            raise ValueError("AUC threshold must be positive")
        out[t] = float(np.mean(np.maximum(0.0, 1.0 - e / t)))
    return out


@dataclass
class HomographyCase:
    pair_id: str
    src: np.ndarray
    dst: np.ndarray
    homography: np.ndarray
    width: int
    height: int


def homography_error(case: HomographyCase, seed: int = 0, ransac_iters: int = 2000, inlier_tol: float = 3.0) -> float:
    try:
        H, _ = estimate_homography(case.src, case.dst, ransac_iters, inlier_tol, seed)
    except DegenerateError:
        return float("inf")
    return corner_error(H, case.homography, case.width, case.height)


def homography_auc(cases: Sequence[HomographyCase], thresholds=DEFAULT_AUC_THRESHOLDS, seed: int = 0) -> dict[float, float]:
    """Corner-error AUC; RANSAC for pair ``k`` is seeded with ``seed + k``."""
    errors = [homography_error(c, seed + k) for k, c in enumerate(cases)]
    return auc_from_errors(errors, thresholds)


def compute_metrics(
    pairs: Sequence[EvalPair],
    etas=DEFAULT_ETAS,
    textured: bool = True,
    patch: int = TEXTURE_PATCH,
    tau: float = TEXTURE_TAU,
    homographies: Sequence[HomographyCase] | None = None,
    auc_thresholds=DEFAULT_AUC_THRESHOLDS,
) -> dict:
    metrics: dict = {"MA": {_key(e): matching_accuracy(pairs, e) for e in etas}}
    if textured:
        kept, dropped = restrict_to_textured(pairs, patch, tau)
        metrics["MA_text"] = {_key(e): (matching_accuracy(kept, e) if kept else None) for e in etas}
        metrics["texture"] = {"patch": patch, "tau": tau, "pairs_dropped": dropped}
    if homographies:
        metrics["AUC"] = {_key(t): v for t, v in homography_auc(homographies, auc_thresholds).items()}
    return metrics


def _key(v: float) -> str:
    return f"{v:g}"


def report_document(metrics: Mapping, meta: Mapping | None = None) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION, "metrics": dict(metrics), "meta": dict(meta or {})}


def parse_report(text: str) -> dict:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise EvalSchemaError("unsupported report schema")
    return doc


def overlay_image(source, target, queries, predictions, ground_truth, eta: float = 2.0) -> tuple[Image.Image, int]:
    """Side-by-side view with one query -> prediction line per record.

    Lines are green when the prediction lies within ``eta`` of the ground
    truth and red otherwise.
    """
    s = (np.clip(np.asarray(source, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    t = (np.clip(np.asarray(target, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    h = max(s.shape[0], t.shape[0])
    canvas = Image.new("RGB", (s.shape[1] + t.shape[1], h))
    canvas.paste(Image.fromarray(s), (0, 0))
    canvas.paste(Image.fromarray(t), (s.shape[1], 0))
    draw = ImageDraw.Draw(canvas)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    n = 0
    for qi, pi, gi in zip(q, p, g):
        colour = (0, 255, 0) if np.linalg.norm(pi - gi) < eta else (255, 0, 0)
        draw.line([(qi[0], qi[1]), (pi[0] + s.shape[1], pi[1])], fill=colour, width=1)
        n += 1
    return canvas, n


@dataclass
class ReportFiles:
    json_path: Path
    overlays: list[Path] = field(default_factory=list)
    line_counts: list[int] = field(default_factory=list)


def emit_report(
    metrics: Mapping,
    path,
    meta: Mapping | None = None,
    overlays: Sequence[tuple[str, EvalPair, np.ndarray]] = (),
    eta: float = 2.0,
) -> ReportFiles:
    """Write the JSON report and one overlay PNG per ``(name, pair, target_image)``."""
    path = Path(path)
    path.write_text(json.dumps(report_document(metrics, meta), indent=2, sort_keys=True) + "\n")
    files = ReportFiles(path)
    for name, pair, target in overlays:
        img, n = overlay_image(pair.source, target, pair.queries, pair.predictions, pair.ground_truth, eta)
        out = path.with_name(f"{path.stem}_{name}.png")
        img.save(out)
        files.overlays.append(out)
        files.line_counts.append(n)
    return files


def evaluate_model(model, pairs, coarse_only: bool = False) -> list[EvalPair]:
    """Run the matcher on synthetic pairs and collect predictions against ground truth."""
    out = []
    for p in pairs:
        recs = match_pair(model, p.source, p.target, p.queries, coarse_only=coarse_only)
        pred = np.array([r.coarse if coarse_only else r.prediction for r in recs])
        out.append(EvalPair(str(p.seed), p.queries, pred, p.correspondents, p.source))
    return out
