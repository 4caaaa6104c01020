"""Image and metrics output: PNG for viewing, raw float32 for exact values."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import DomainError


def to_uint8(image, vmin: float = -1.0, vmax: float = 1.0) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    scaled = np.clip((img - vmin) / (vmax - vmin), 0.0, 1.0)
    return np.round(scaled * 255).astype(np.uint8)


def write_png(path, image, vmin: float = -1.0, vmax: float = 1.0) -> Path:
    """Write an (H, W), (H, W, 1) or (H, W, 3) array mapped linearly from [vmin, vmax]."""
    from PIL import Image

    img = to_uint8(image, vmin, vmax)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim == 3 and img.shape[-1] not in (3, 4):
        raise DomainError("PNG export needs 1, 3 or 4 channels")
    path = Path(path)
    Image.fromarray(img).save(path)
    return path


def write_raw(path, array) -> Path:
    """Little-endian float32 dump plus a JSON sidecar holding the shape."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    path.write_bytes(arr.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"dtype": "<f4", "shape": list(arr.shape)}))
    return path


def read_raw(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"])


def write_image(stem, image, vmin: float = -1.0, vmax: float = 1.0) -> None:
    stem = Path(stem)
    write_png(stem.with_suffix(".png"), image, vmin, vmax)
    write_raw(stem.with_suffix(".f32"), image)


def write_json(path, data) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_default) + "\n")
    return path


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_records_csv(path, records) -> Path:
    """Write a list of dataclass instances as CSV with a header row."""
    path = Path(path)
    records = list(records)
    with path.open("w", newline="") as fh:
        if not records:
            return path
        names = [f.name for f in fields(records[0])]
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for k, v in asdict(rec).items()})
    return path
