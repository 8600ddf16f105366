"""Flat run configuration shared by the CLI commands.

One JSON object with the keys below configures dataset synthesis, codec
training, seq2seq training, and inference. Unknown keys are rejected so
ablation-study typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .codec import CodecConfig
from .features import FEATURE_SEED
from .s2s import S2SConfig


@dataclass
class RunConfig:
    # dataset
    n_images: int = 500
    image_size: int = 32
    # codec architecture
    channels: tuple = (16, 32, 64)
    latent_dim: int = 32
    codebook_size: int = 64
    norm_eps: float = 1e-5
    norm_groups: int = 1
    tau: tuple = (1.0, 1.0, 1.0)
    use_attention: bool = True
    use_relative_estimation: bool = True
    use_symmetrical_connection: bool = True
    inference_plain_path: bool = True
    # codec objective / training
    recon_weight: float = 1.0
    vq_weight: float = 1.0
    perceptual_weight: float = 1.0
    gan_weight: float = 1.0
    gan_warmup_frac: float = 0.25
    feature_seed: int = FEATURE_SEED
    codec_lr: float = 1e-3
    disc_lr: float = 1e-4
    codec_batch: int = 8
    codec_steps: int = 2000
    # training-time mask sampling
    train_mask_min_ratio: float = 0.10
    train_mask_max_ratio: float = 0.40
    train_bbox_prob: float = 0.5
    # seq2seq
    model_dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    patch_size: int = 4
    dropout: float = 0.1
    warmup_frac: float = 0.05
    use_text: bool = True
    use_low: bool = True
    use_high: bool = True
    decode_mode: str = "greedy"
    temperature: float = 1.0
    max_text_len: int = 8
    s2s_lr: float = 3e-4
    s2s_batch: int = 8
    s2s_steps: int = 1000
    # global
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.tau = tuple(self.tau)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def apply_ablations(self, names) -> None:
        """Flip feature flags off: sym_conn, rel_est, text, low, high."""
        mapping = {
            "sym_conn": "use_symmetrical_connection",
            "rel_est": "use_relative_estimation",
            "text": "use_text",
            "low": "use_low",
            "high": "use_high",
        }
        for name in names:
            if name not in mapping:
                raise ValueError(f"unknown ablation '{name}' (choose from {sorted(mapping)})")
            setattr(self, mapping[name], False)

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            image_size=self.image_size,
            channels=self.channels,
            latent_dim=self.latent_dim,
            codebook_size=self.codebook_size,
            norm_eps=self.norm_eps,
            norm_groups=self.norm_groups,
            tau=self.tau,
            use_attention=self.use_attention,
            use_relative_estimation=self.use_relative_estimation,
            use_symmetrical_connection=self.use_symmetrical_connection,
            inference_plain_path=self.inference_plain_path,
            recon_weight=self.recon_weight,
            vq_weight=self.vq_weight,
            perceptual_weight=self.perceptual_weight,
            gan_weight=self.gan_weight,
            gan_warmup_frac=self.gan_warmup_frac,
            feature_seed=self.feature_seed,
            seed=self.seed,
        )

    def s2s_config(self, vocab_dict: dict) -> S2SConfig:
        levels = len(self.channels)
        return S2SConfig(
            model_dim=self.model_dim,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            heads=self.heads,
            patch_size=self.patch_size,
            dropout=self.dropout,
            warmup_frac=self.warmup_frac,
            use_text=self.use_text,
            use_low=self.use_low,
            use_high=self.use_high,
            decode_mode=self.decode_mode,
            temperature=self.temperature,
            image_size=self.image_size,
            latent_size=self.image_size // (2**levels),
            latent_dim=self.latent_dim,
            codebook_size=self.codebook_size,
            vocab=vocab_dict,
            seed=self.seed,
        )
