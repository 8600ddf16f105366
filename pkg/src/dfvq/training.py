"""Deterministic training drivers for the codec and the seq2seq model.

Each run derives one RNG root per purpose (codec run, s2s run) and one child
stream per step, so a (config, seed) pair fixes every batch index, every
sampled mask, and every dropout draw.
"""

from __future__ import annotations

import numpy as np

from .codec import CodecTrainer, DefectFreeCodec, quantize
from .config import RunConfig
from .masks import irregular_mask
from .rng import Rng
from .s2s import MPS2S, S2STrainer, Vocab, tokenize_text

_CODEC_STREAM = 1
_S2S_STREAM = 2
_EVAL_STREAM = 3


def sample_batch_masks(records, indices, step_rng: Rng, cfg: RunConfig) -> np.ndarray:
    """Per-item defect masks: object bbox or irregular walk, random ratio."""
    masks = np.zeros((len(indices), cfg.image_size, cfg.image_size))
    for j, idx in enumerate(indices):
        item_rng = step_rng.spawn(j + 1)
        if item_rng.uniform() < cfg.train_bbox_prob:
            r0, c0, r1, c1 = records[int(idx)]["bbox"]
            masks[j, r0:r1, c0:c1] = 1.0
        else:
            ratio = cfg.train_mask_min_ratio + item_rng.uniform() * (
                cfg.train_mask_max_ratio - cfg.train_mask_min_ratio
            )
            masks[j] = irregular_mask(cfg.image_size, ratio, item_rng)
    return masks


def train_codec(manifest: dict, images: np.ndarray, cfg: RunConfig,
                steps: int | None = None, log=None, log_every: int = 100):
    """Train a fresh codec on the manifest images; returns (codec, history)."""
    steps = cfg.codec_steps if steps is None else steps
    codec = DefectFreeCodec(cfg.codec_config())
    trainer = CodecTrainer(codec, total_steps=steps, lr=cfg.codec_lr, disc_lr=cfg.disc_lr)
    root = Rng(cfg.seed).spawn(_CODEC_STREAM)
    records = manifest["records"]
    history = []
    for step in range(1, steps + 1):
        step_rng = root.spawn(step)
        indices = step_rng.integers(0, len(records), cfg.codec_batch)
        masks = sample_batch_masks(records, indices, step_rng, cfg)
        metrics = trainer.train_step(images[indices], masks)
        history.append(metrics)
        if log and (step == 1 or step % log_every == 0 or step == steps):
            log(f"codec step {step}/{steps} "
                f"recon_mse {metrics['recon_mse']:.6f} loss_v {metrics['loss_v']:.6f} "
                f"loss_p {metrics['loss_p']:.6f} loss_g {metrics['loss_g']:.6f} "
                f"usage {metrics['codebook_usage']:.3f}")
    return codec, history


def encode_batch(codec: DefectFreeCodec, images: np.ndarray, masks: np.ndarray):
    """Frozen-codec token grids and latent masks for a training batch."""
    enc = codec.encode_defect_free(images, masks)
    tokens, _, _ = quantize(enc.z, codec.codebook)
    return tokens, enc.pyramid[-1]


def build_vocab(manifest: dict, max_len: int) -> Vocab:
    return Vocab.from_captions([r["caption"] for r in manifest["records"]], max_len=max_len)


def train_s2s(manifest: dict, images: np.ndarray, codec: DefectFreeCodec, cfg: RunConfig,
              steps: int | None = None, log=None, log_every: int = 100):
    """Train the seq2seq inpainter against a frozen codec; returns (model, history)."""
    steps = cfg.s2s_steps if steps is None else steps
    vocab = build_vocab(manifest, cfg.max_text_len)
    model = MPS2S(cfg.s2s_config(vocab.to_dict()))
    trainer = S2STrainer(model, total_steps=steps, lr=cfg.s2s_lr)
    trainer.set_codebook(codec.codebook.data)
    records = manifest["records"]
    text_ids = np.stack([tokenize_text(r["caption"], vocab) for r in records])
    root = Rng(cfg.seed).spawn(_S2S_STREAM)
    history = []
    for step in range(1, steps + 1):
        step_rng = root.spawn(step)
        indices = step_rng.integers(0, len(records), cfg.s2s_batch)
        masks = sample_batch_masks(records, indices, step_rng, cfg)
        batch = images[indices]
        tokens, latent_mask = encode_batch(codec, batch, masks)
        defective = batch * (1.0 - masks[:, None])
        metrics = trainer.train_step(text_ids[indices], defective, tokens, latent_mask,
                                     rng=step_rng.spawn(0))
        history.append(metrics)
        if log and (step == 1 or step % log_every == 0 or step == steps):
            log(f"s2s step {step}/{steps} loss {metrics['loss']:.6f} "
                f"masked {metrics['masked_cells']}")
    return model, history


def masked_token_accuracy(model: MPS2S, codec: DefectFreeCodec, manifest: dict,
                          images: np.ndarray, cfg: RunConfig, seed: int | None = None) -> float:
    """Teacher-forced top-1 accuracy at masked latent cells over a split."""
    vocab = model.config.get_vocab()
    records = manifest["records"]
    root = Rng(cfg.seed if seed is None else seed).spawn(_EVAL_STREAM)
    correct = 0
    total = 0
    batch = cfg.s2s_batch
    for start in range(0, len(records), batch):
        idx = np.arange(start, min(start + batch, len(records)))
        step_rng = root.spawn(start + 1)
        masks = sample_batch_masks(records, idx, step_rng, cfg)
        tokens, latent_mask = encode_batch(codec, images[idx], masks)
        if latent_mask.sum() == 0:
            continue
        text = np.stack([tokenize_text(records[int(i)]["caption"], vocab) for i in idx])
        defective = images[idx] * (1.0 - masks[:, None])
        cond, _ = model.encode_condition(text, defective, tokens, latent_mask, codec.codebook.data)
        logits = model.decoder_logits(cond, model.shifted_inputs(tokens)).data
        pred = np.argmax(logits, axis=-1).reshape(tokens.shape)
        hits = (pred == tokens)[latent_mask == 1]
        correct += int(hits.sum())
        total += hits.size
    return correct / total if total else 0.0
