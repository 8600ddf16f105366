"""Synthetic captioned shapes dataset and PPM image I/O.

Each image holds one colored geometric shape (circle, square, or triangle;
8 colors; 3 sizes) on a contrasting background, captioned from the closed
template "a {size} {color} {shape}". Every record derives its own RNG stream
from (dataset seed, record index), so generation is reproducible file-for-file
and parallelizable per record.

Images are stored as binary PPM (P6, maxval 255); 8-bit quantization uses
round-half-up on [0, 1] -> [0, 255].
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .rng import Rng

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 220, 50),
    "cyan": (60, 200, 200),
    "magenta": (200, 60, 200),
    "orange": (240, 140, 40),
    "purple": (130, 60, 180),
}
SIZES = {"small": 4, "medium": 6, "large": 9}
SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = ((212, 212, 212), (46, 46, 46))


class DataError(ValueError):
    """Malformed image file or manifest."""


# ---------------------------------------------------------------------------
# PPM I/O


def write_ppm(path: str, image_u8: np.ndarray) -> None:
    img = np.asarray(image_u8)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"write_ppm expects uint8 HxWx3, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval as whitespace-separated tokens
    fields_found, pos = [], 2
    while len(fields_found) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields_found.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(v) for v in fields_found)
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    if data.size != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()


def to_float_chw(image_u8: np.ndarray) -> np.ndarray:
    """uint8 HWC -> float64 CHW in [0, 1]."""
    return np.asarray(image_u8, dtype=np.float64).transpose(2, 0, 1) / 255.0


def to_u8_hwc(image_chw: np.ndarray) -> np.ndarray:
    """float CHW in [0, 1] -> uint8 HWC, round half up."""
    scaled = np.floor(np.asarray(image_chw, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_mask_ppm(path: str, mask: np.ndarray) -> None:
    """Binary mask as P6: white = defective."""
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    write_ppm(path, np.repeat(m[:, :, None], 3, axis=2))


def read_mask(path: str) -> np.ndarray:
    """Any nonzero pixel counts as defective."""
    img = read_ppm(path)
    return (img.max(axis=2) > 127).astype(np.float64)


# ---------------------------------------------------------------------------
# Shape rasterization


def rasterize(kind: str, color: tuple, half: int, cy: int, cx: int,
              size: int, background: tuple) -> tuple[np.ndarray, list]:
    """Draw one shape; returns (uint8 HWC image, tight bbox [r0, c0, r1, c1))."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "circle":
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    elif kind == "square":
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif kind == "triangle":  # apex up, flat base
        inside = (yy >= cy - half) & (yy <= cy + half) & (np.abs(xx - cx) <= (yy - (cy - half)) / 2.0)
    else:
        raise DataError(f"unknown shape kind '{kind}'")
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = np.asarray(background, dtype=np.uint8)
    img[inside] = np.asarray(color, dtype=np.uint8)
    rows, cols = np.where(inside)
    bbox = [int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1]
    return img, bbox


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass
class DatasetConfig:
    n: int = 500
    image_size: int = 32
    split: str = "train"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)


def generate_record(config: DatasetConfig, index: int) -> tuple[np.ndarray, dict]:
    """Deterministic (image, record) pair for one dataset index."""
    rng = Rng(config.seed).spawn(index)
    kind = SHAPES[rng.choice(len(SHAPES))]
    color_name = sorted(COLORS)[rng.choice(len(COLORS))]
    size_name = sorted(SIZES)[rng.choice(len(SIZES))]
    background = BACKGROUNDS[rng.choice(len(BACKGROUNDS))]
    half = SIZES[size_name]
    margin = half + 2
    cy = int(rng.integers(margin, config.image_size - margin))
    cx = int(rng.integers(margin, config.image_size - margin))
    img, bbox = rasterize(kind, COLORS[color_name], half, cy, cx, config.image_size, background)
    record = {
        "image": f"img_{index:05d}.ppm",
        "caption": f"a {size_name} {color_name} {kind}",
        "bbox": bbox,
        "shape": kind,
        "color": color_name,
        "size": size_name,
        "seed": index,
    }
    return img, record


def make_dataset(out_dir: str, config: DatasetConfig) -> dict:
    """Write N images plus manifest.json; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(config.n):
        img, record = generate_record(config, i)
        write_ppm(os.path.join(out_dir, record["image"]), img)
        records.append(record)
    manifest = {"split": config.split, "seed": config.seed,
                "config": asdict(config), "records": records}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def load_manifest(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("split", "records"):
        if key not in manifest:
            raise DataError(f"manifest missing '{key}'")
    return manifest


def load_images(manifest: dict, base_dir: str) -> np.ndarray:
    """All manifest images as one float64 [N, 3, H, W] stack."""
    return np.stack([
        to_float_chw(read_ppm(os.path.join(base_dir, rec["image"])))
        for rec in manifest["records"]
    ])
