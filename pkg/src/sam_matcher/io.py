"""Images, CSV tables and the binary checkpoint container."""
from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from PIL import Image

from .model import SAM, SAMConfig, MatchRecord

CHECKPOINT_MAGIC = b"SAMCKPT\0"
CHECKPOINT_VERSION = 1

MATCH_HEADER = ["pair_id", "qx", "qy", "px", "py", "score"]
GT_HEADER = ["pair_id", "qx", "qy", "gx", "gy"]
HOMOGRAPHY_HEADER = ["pair_id"] + [f"h{r}{c}" for r in range(3) for c in range(3)]


class SchemaError(ValueError):
    """A file parsed but does not follow the expected layout."""


# -- images -------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """PNG/PGM/PPM -> float32 HxWx3 in [0, 1]; grayscale is replicated."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(im, dtype=np.float64)
            a = a / (65535.0 if a.max() > 255 else 255.0)
        else:
            a = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64) / 255.0
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a.astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    a = np.asarray(image, dtype=np.float64)
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)).save(path)


# -- CSV ------------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{float(v):.9g}"


def _write_rows(path, header: list[str], rows: Iterable[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read_rows(path, header: list[str]) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != header:
            raise SchemaError(f"{path}: expected columns {','.join(header)}, got {reader.fieldnames}")
        rows = list(reader)
    return rows


def write_matches(path, matches: Mapping[str, list[MatchRecord]], coarse_only: bool = False) -> None:
    rows = []
    for pair_id, records in matches.items():
        for r in records:
            p = r.coarse if coarse_only else r.prediction
            rows.append([pair_id, r.query[0], r.query[1], _fmt(p[0]), _fmt(p[1]), _fmt(r.score)])
    _write_rows(path, MATCH_HEADER, rows)


def _grouped(rows: list[dict], value_cols: tuple[str, str], path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out: dict[str, tuple[list, list]] = {}
    try:
        for row in rows:
            q, v = out.setdefault(row["pair_id"], ([], []))
            q.append((int(row["qx"]), int(row["qy"])))
            v.append((float(row[value_cols[0]]), float(row[value_cols[1]])))
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{path}: malformed row ({e})") from e
    return {k: (np.array(q, dtype=np.int64).reshape(-1, 2), np.array(v).reshape(-1, 2)) for k, (q, v) in out.items()}


def read_matches(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """pair_id -> (queries, predictions)."""
    return _grouped(_read_rows(path, MATCH_HEADER), ("px", "py"), path)


def write_ground_truth(path, pairs: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None:
    rows = []
    for pair_id, (queries, gt) in pairs.items():
        for q, g in zip(queries, gt):
            rows.append([pair_id, int(q[0]), int(q[1]), _fmt(g[0]), _fmt(g[1])])
    _write_rows(path, GT_HEADER, rows)


def read_ground_truth(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """pair_id -> (queries, ground-truth correspondents)."""
    return _grouped(_read_rows(path, GT_HEADER), ("gx", "gy"), path)


def write_homographies(path, hs: Mapping[str, np.ndarray]) -> None:
    rows = [[pair_id] + [_fmt(v) for v in np.asarray(H, dtype=np.float64).ravel()] for pair_id, H in hs.items()]
    _write_rows(path, HOMOGRAPHY_HEADER, rows)


def read_homographies(path) -> dict[str, np.ndarray]:
    out = {}
    for row in _read_rows(path, HOMOGRAPHY_HEADER):
        try:
            out[row["pair_id"]] = np.array([float(row[k]) for k in HOMOGRAPHY_HEADER[1:]]).reshape(3, 3)
        except (TypeError, ValueError) as e:
            raise SchemaError(f"{path}: malformed homography row ({e})") from e
    return out


def read_queries(path) -> np.ndarray:
    """Two integer columns ``qx,qy`` with a header line."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["qx", "qy"]:
            raise SchemaError(f"{path}: expected columns qx,qy")
        try:
            q = [(int(r["qx"]), int(r["qy"])) for r in reader]
        except (TypeError, ValueError) as e:
            raise SchemaError(f"{path}: malformed query row ({e})") from e
    return np.array(q, dtype=np.int64).reshape(-1, 2)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, model: SAM, extra: Mapping | None = None) -> None:
    """Magic, version, header length, JSON header, then little-endian f32 arrays.

    The header records the profile, seed, full configuration and, for every
    parameter, its name, shape and byte offset into the data section.
    """
    arrays, index, offset = [], [], 0
    for name, p in sorted(model.named_parameters()):
        a = p.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        arrays.append(a.tobytes())
        offset += a.nbytes
    header = {
        "profile": model.config.profile,
        "seed": model.config.seed,
        "config": model.config.to_dict(),
        "arrays": index,
        "extra": dict(extra or {}),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        f.write(hb)
        for a in arrays:
            f.write(a)


def read_checkpoint_header(data: bytes) -> tuple[dict, int]:
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise SchemaError("not a SAM checkpoint")
    version, hlen = struct.unpack_from("<II", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen])
    except ValueError as e:
        raise SchemaError("corrupt checkpoint header") from e
    return header, start + hlen


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[SAM, dict]:
    data = Path(path).read_bytes()
    header, base = read_checkpoint_header(data)
    model = SAM(SAMConfig.from_dict(header["config"])).to(dtype)
    params = dict(model.named_parameters())
    names = {e["name"] for e in header["arrays"]}
    if names != set(params):
        raise SchemaError("checkpoint parameters do not match the configuration")
    need = sum(4 * int(np.prod(e["shape"])) for e in header["arrays"])
    if len(data) - base != need:
        raise SchemaError(f"checkpoint data section is {len(data) - base} bytes, expected {need}")
    with torch.no_grad():
        for e in header["arrays"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            a = np.frombuffer(data, dtype="<f4", count=n, offset=base + e["offset"]).reshape(e["shape"])
            p = params[e["name"]]
            if tuple(p.shape) != tuple(a.shape):
                raise SchemaError(f"shape mismatch for {e['name']}")
            p.copy_(torch.from_numpy(a.copy()))
    model.eval()
    return model, header


def write_meta(path, **fields) -> None:
    """JSON sidecar recording the seed and configuration behind an output file."""
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True, default=str) + "\n")


def meta_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")
