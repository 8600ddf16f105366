"""Defect mask sampling: object bounding boxes and irregular brush regions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class MaskParamError(ValueError):
    """Unreachable ratio or malformed mask spec."""


@dataclass
class MaskSpec:
    kind: str = "irregular"  # "bbox" | "irregular"
    target_ratio: float = 0.25
    brush_min: int = 1
    brush_max: int = 2
    seed: int = 0


def _disc_offsets(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    keep = yy**2 + xx**2 <= radius**2
    return np.stack([yy[keep], xx[keep]], axis=1)


def irregular_mask(size: int, target_ratio: float, rng: Rng,
                   brush_min: int = 1, brush_max: int = 2) -> np.ndarray:
    """Random-walk brush painted until exactly the target pixel count.

    The brush radius shrinks near the target and the final pixels are added
    one at a time, so the realized ratio equals round(target * size^2) / size^2
    (well within the +-10% relative tolerance).
    """
    if not 0.0 < target_ratio <= 0.9:
        raise MaskParamError(f"target ratio must lie in (0, 0.9], got {target_ratio}")
    target = max(1, int(round(target_ratio * size * size)))
    mask = np.zeros((size, size), dtype=np.float64)
    pos = np.array([rng.integers(0, size), rng.integers(0, size)])
    direction = _STEPS[rng.choice(4)]
    painted = 0
    stall = 0
    while painted < target:
        remaining = target - painted
        if remaining > 4 * brush_max**2:
            radius = brush_max
        elif remaining > 4 * brush_min**2:
            radius = brush_min
        else:
            radius = 0
        cells = pos[None] + _disc_offsets(radius)
        cells = cells[(cells[:, 0] >= 0) & (cells[:, 0] < size)
                      & (cells[:, 1] >= 0) & (cells[:, 1] < size)]
        fresh = cells[mask[cells[:, 0], cells[:, 1]] == 0][:remaining]
        if fresh.size:
            mask[fresh[:, 0], fresh[:, 1]] = 1.0
            painted += len(fresh)
            stall = 0
        else:
            stall += 1
            if stall > 8:  # brush boxed in; jump to a fresh area
                empties = np.argwhere(mask == 0)
                pos = empties[rng.choice(len(empties))].copy()
                stall = 0
                continue
        if rng.uniform() < 0.4:
            direction = _STEPS[rng.choice(4)]
        step = 1 + rng.choice(2)
        pos = np.clip(pos + np.array(direction) * step, 0, size - 1)
    return mask


def bbox_mask(size: int, bbox) -> np.ndarray:
    r0, c0, r1, c1 = bbox
    if not (0 <= r0 < r1 <= size and 0 <= c0 < c1 <= size):
        raise MaskParamError(f"bbox {bbox} out of bounds for size {size}")
    mask = np.zeros((size, size), dtype=np.float64)
    mask[r0:r1, c0:c1] = 1.0
    return mask


def sample_mask(spec: MaskSpec, image_meta: dict, image_size: int) -> np.ndarray:
    """Binary [H, W] defect mask per the spec kind."""
    if spec.kind == "bbox":
        if "bbox" not in image_meta:
            raise MaskParamError("bbox mask requested but record has no bbox metadata")
        return bbox_mask(image_size, image_meta["bbox"])
    if spec.kind == "irregular":
        return irregular_mask(image_size, spec.target_ratio, Rng(spec.seed),
                              spec.brush_min, spec.brush_max)
    raise MaskParamError(f"unknown mask kind '{spec.kind}'")
