"""End-to-end inpainting: encode, predict masked tokens, decode, write."""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import CheckpointError
from .codec import DefectFreeCodec, load_codec, quantize
from .data import read_mask, read_ppm, to_float_chw, to_u8_hwc, write_ppm
from .rng import Rng
from .s2s import MPS2S, load_s2s, merge_tokens, tokenize_text


def check_compat(codec: DefectFreeCodec, model: MPS2S) -> None:
    c, s = codec.config, model.config
    problems = []
    if c.latent_dim != s.latent_dim:
        problems.append(f"latent dim {c.latent_dim} vs {s.latent_dim}")
    if c.codebook_size != s.codebook_size:
        problems.append(f"codebook size {c.codebook_size} vs {s.codebook_size}")
    if c.latent_size != s.latent_size:
        problems.append(f"latent grid {c.latent_size} vs {s.latent_size}")
    if c.image_size != s.image_size:
        problems.append(f"image size {c.image_size} vs {s.image_size}")
    if problems:
        raise CheckpointError("codec/seq2seq checkpoints incompatible: " + "; ".join(problems))


def inpaint_arrays(codec: DefectFreeCodec, model: MPS2S, image: np.ndarray,
                   mask: np.ndarray, caption: str, mode: str | None = None,
                   seed: int = 0, samples: int = 1):
    """Repair one [3, H, W] float image under a [H, W] mask; returns a list of
    [3, H, W] outputs (one per sample; greedy mode yields identical samples)."""
    check_compat(codec, model)
    cfg = codec.config
    img = image[None] if image.ndim == 3 else image
    m = mask[None] if mask.ndim == 2 else mask

    enc = codec.encode_defect_free(img, m, use_plain_path=cfg.inference_plain_path)
    tokens, _, _ = quantize(enc.z, codec.codebook)
    latent_mask = enc.pyramid[-1]

    vocab = model.config.get_vocab()
    text = tokenize_text(caption, vocab)[None]
    defective = img * (1.0 - m[:, None])
    cond, _ = model.encode_condition(text, defective, tokens, latent_mask, codec.codebook.data)

    outputs = []
    for k in range(samples):
        rng = Rng(seed).spawn(k + 1)
        predicted = model.decode_masked_tokens(cond, tokens, latent_mask, mode=mode, rng=rng)
        merged = merge_tokens(tokens, predicted, latent_mask)
        dec = codec.decode_tokens(merged, enc.trace, enc.pyramid)
        outputs.append(dec.image.data[0])
    return outputs


def _sample_path(out_path: str, k: int, samples: int) -> str:
    if samples == 1:
        return out_path
    stem, ext = os.path.splitext(out_path)
    return f"{stem}_s{k}{ext}"


def inpaint(image_path: str, mask_path: str, caption: str, codec_path: str,
            s2s_path: str, out_path: str, mode: str | None = None,
            seed: int = 0, samples: int = 1) -> list:
    """File-level wrapper; writes one PPM per sample and returns the paths."""
    codec, _ = load_codec(codec_path)
    model, _ = load_s2s(s2s_path)
    image = to_float_chw(read_ppm(image_path))
    mask = read_mask(mask_path)
    if mask.shape != image.shape[1:]:
        raise CheckpointError(f"mask {mask.shape} does not match image {image.shape[1:]}")
    outputs = inpaint_arrays(codec, model, image, mask, caption, mode=mode,
                             seed=seed, samples=samples)
    paths = []
    for k, out in enumerate(outputs):
        path = _sample_path(out_path, k, samples)
        write_ppm(path, to_u8_hwc(out))
        paths.append(path)
    return paths
