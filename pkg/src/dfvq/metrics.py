"""Fréchet feature distance and the repair-quality report."""

from __future__ import annotations

import os

import numpy as np

from .data import DataError, read_mask, read_ppm, to_float_chw
from .features import FEATURE_SEED, feature_net, feature_vectors


class MetricParamError(ValueError):
    """Evaluation sets too small or mismatched."""


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clamp to zero."""
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """|mu1-mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)) via C1^(1/2) C2 C1^(1/2)."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    root1 = _psd_sqrt(cov1)
    inner = _psd_sqrt(root1 @ cov2 @ root1)
    dist = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(inner))
    return max(dist, 0.0)


def frechet_from_features(feats1: np.ndarray, feats2: np.ndarray) -> float:
    f1 = np.atleast_2d(np.asarray(feats1, dtype=np.float64))
    f2 = np.atleast_2d(np.asarray(feats2, dtype=np.float64))
    if f1.ndim != 2 or f2.ndim != 2:
        raise MetricParamError("feature sets must be 2-D [n, dim]")
    if f1.shape[0] < 2 or f2.shape[0] < 2:
        raise MetricParamError(f"need at least 2 samples per set, got {f1.shape[0]}/{f2.shape[0]}")
    mu1, mu2 = f1.mean(axis=0), f2.mean(axis=0)
    cov1 = np.atleast_2d(np.cov(f1, rowvar=False))
    cov2 = np.atleast_2d(np.cov(f2, rowvar=False))
    return frechet_distance(mu1, cov1, mu2, cov2)


def _list_ppms(directory: str) -> list:
    names = sorted(n for n in os.listdir(directory) if n.endswith(".ppm"))
    if not names:
        raise MetricParamError(f"no .ppm images found in {directory}")
    return names


def evaluate_dirs(generated_dir: str, reference_dir: str,
                  feature_seed: int = FEATURE_SEED, masks_dir: str | None = None) -> dict:
    """Fréchet score between two image sets, plus per-image region metrics.

    Images pair by filename. When ``masks_dir`` holds matching mask files,
    the report adds the max abs 8-bit deviation outside each mask and the
    MSE/PSNR inside it (PSNR is null for an exact match).
    """
    gen_names = _list_ppms(generated_dir)
    ref_names = _list_ppms(reference_dir)
    if gen_names != ref_names:
        raise MetricParamError(
            f"sets differ: {len(gen_names)} generated vs {len(ref_names)} reference, or names mismatch"
        )

    gen_u8 = [read_ppm(os.path.join(generated_dir, n)) for n in gen_names]
    ref_u8 = [read_ppm(os.path.join(reference_dir, n)) for n in ref_names]
    layers = feature_net(feature_seed)
    gen_feats = feature_vectors(layers, np.stack([to_float_chw(im) for im in gen_u8]))
    ref_feats = feature_vectors(layers, np.stack([to_float_chw(im) for im in ref_u8]))

    report = {
        "count": len(gen_names),
        "feature_seed": int(feature_seed),
        "frechet": frechet_from_features(gen_feats, ref_feats),
        "per_image": [{"name": n} for n in gen_names],
    }

    if masks_dir is not None:
        devs, mses = [], []
        for entry, g, r in zip(report["per_image"], gen_u8, ref_u8):
            mask_path = os.path.join(masks_dir, entry["name"])
            if not os.path.exists(mask_path):
                raise DataError(f"missing mask file {mask_path}")
            m = read_mask(mask_path)
            valid = m == 0
            diff_u8 = np.abs(g.astype(np.int64) - r.astype(np.int64))
            entry["valid_max_abs_dev"] = int(diff_u8[valid].max()) if valid.any() else 0
            if (~valid).any():
                df = (g.astype(np.float64) - r.astype(np.float64))[~valid] / 255.0
                mse = float(np.mean(df * df))
            else:
                mse = 0.0
            entry["masked_mse"] = mse
            entry["masked_psnr"] = None if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))
            devs.append(entry["valid_max_abs_dev"])
            mses.append(mse)
        report["valid_max_abs_dev"] = max(devs)
        report["masked_mse_mean"] = float(np.mean(mses))
    return report
