"""Multi-perspective sequence-to-sequence latent inpainter.

Three transformer encoders look at the same scene from different angles:
word ids of the caption, non-overlapping pixel patches of the defective
image, and codebook embeddings of the latent token grid (masked cells
swapped for a learned mask vector). Their outputs are concatenated into one
condition sequence. A causal transformer decoder cross-attends to it and
predicts codebook ids, but only cells flagged by the latent mask are ever
scored or replaced.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .masked import masked_attention
from .optim import Adam
from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    dropout,
    embedding,
    gather_last,
    linear,
    log_softmax,
    mul,
    record,
    relu,
    reshape,
    softmax,
    sqrt,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)

S2S_MAGIC = b"MPS2"

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
_RESERVED = {"<pad>": PAD_ID, "<unk>": UNK_ID, "<bos>": BOS_ID}

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class Vocab:
    """Word-level vocabulary with reserved PAD/UNK/BOS ids."""

    words: dict
    max_len: int = 8

    def __post_init__(self):
        for w, i in self.words.items():
            if i < 3:
                raise ValueError(f"word '{w}' assigned reserved id {i}")

    @property
    def size(self) -> int:
        return 3 + len(self.words)

    @classmethod
    def from_captions(cls, captions, max_len: int = 8) -> "Vocab":
        seen = set()
        for cap in captions:
            seen.update(_WORD_RE.findall(cap.lower()))
        return cls(words={w: 3 + i for i, w in enumerate(sorted(seen))}, max_len=max_len)

    def to_dict(self) -> dict:
        return {"words": dict(self.words), "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(words=dict(d["words"]), max_len=int(d["max_len"]))


def tokenize_text(caption: str, vocab: Vocab) -> np.ndarray:
    """Lowercase, split on non-alphanumerics, map to ids, pad/truncate."""
    ids = [vocab.words.get(w, UNK_ID) for w in _WORD_RE.findall(caption.lower())]
    ids = ids[: vocab.max_len]
    ids += [PAD_ID] * (vocab.max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class S2SConfig:
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
    image_size: int = 32
    in_channels: int = 3
    latent_size: int = 4
    latent_dim: int = 32
    codebook_size: int = 64
    vocab: dict = field(default_factory=lambda: Vocab.from_captions([]).to_dict())
    seed: int = 0

    def __post_init__(self):
        if not (self.use_text or self.use_low or self.use_high):
            raise ValueError("at least one perspective must stay enabled")
        if self.model_dim % self.heads:
            raise ValueError(f"model dim {self.model_dim} not divisible by {self.heads} heads")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.decode_mode not in ("greedy", "sampled"):
            raise ValueError(f"decode mode must be greedy|sampled, got '{self.decode_mode}'")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_cells(self) -> int:
        return self.latent_size**2

    def get_vocab(self) -> Vocab:
        return Vocab.from_dict(self.vocab)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "S2SConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown s2s config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale_reference(cls) -> "S2SConfig":
        """Published-scale preset (12/24 layers, width 1024, patch 16).
        Documented for reference only; never trained here."""
        return cls(model_dim=1024, enc_layers=12, dec_layers=24, heads=16,
                   patch_size=16, image_size=256, latent_size=32,
                   latent_dim=256, codebook_size=8192)


# ---------------------------------------------------------------------------
# Transformer pieces


def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape) * 2.0 * bound - bound


class LayerNorm:
    def __init__(self, store, rng, name, dim, eps=1e-5):
        self.g = store.add(f"{name}.g", np.ones(dim))
        self.b = store.add(f"{name}.b", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        mu = tensor_mean(x, axis=-1, keepdims=True)
        cen = sub(x, mu)
        var = tensor_mean(mul(cen, cen), axis=-1, keepdims=True)
        return add(mul(cen / sqrt(add(var, self.eps)), self.g), self.b)


class MultiHeadAttention:
    def __init__(self, store, rng, name, dim, heads):
        self.heads = heads
        self.dim = dim
        for part in ("q", "k", "v", "o"):
            setattr(self, f"w{part}", store.add(f"{name}.w{part}", _uniform_init(rng, (dim, dim), dim)))
            setattr(self, f"b{part}", store.add(f"{name}.b{part}", np.zeros(dim)))

    def _split(self, x, n, length):
        dk = self.dim // self.heads
        return transpose(reshape(x, (n, length, self.heads, dk)), (0, 2, 1, 3))

    def __call__(self, q_seq, kv_seq, allowed: np.ndarray):
        n, lq, _ = q_seq.shape
        lk = kv_seq.shape[1]
        q = self._split(linear(q_seq, self.wq, self.bq), n, lq)
        k = self._split(linear(kv_seq, self.wk, self.bk), n, lk)
        v = self._split(linear(kv_seq, self.wv, self.bv), n, lk)
        att = masked_attention(q, k, v, allowed)  # allowed broadcasts over heads
        merged = reshape(transpose(att, (0, 2, 1, 3)), (n, lq, self.dim))
        return linear(merged, self.wo, self.bo)


class FeedForward:
    def __init__(self, store, rng, name, dim):
        hidden = 4 * dim
        self.w1 = store.add(f"{name}.w1", _uniform_init(rng, (dim, hidden), dim))
        self.b1 = store.add(f"{name}.b1", np.zeros(hidden))
        self.w2 = store.add(f"{name}.w2", _uniform_init(rng, (hidden, dim), hidden))
        self.b2 = store.add(f"{name}.b2", np.zeros(dim))

    def __call__(self, x):
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)


class EncoderLayer:
    def __init__(self, store, rng, name, dim, heads):
        self.ln1 = LayerNorm(store, rng, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(store, rng, f"{name}.attn", dim, heads)
        self.ln2 = LayerNorm(store, rng, f"{name}.ln2", dim)
        self.ffn = FeedForward(store, rng, f"{name}.ffn", dim)

    def __call__(self, x, drop):
        h = self.ln1(x)
        x = add(x, drop(self.attn(h, h, np.ones((1, 1, 1, 1)))))
        x = add(x, drop(self.ffn(self.ln2(x))))
        return x


class DecoderLayer:
    def __init__(self, store, rng, name, dim, heads):
        self.ln1 = LayerNorm(store, rng, f"{name}.ln1", dim)
        self.self_attn = MultiHeadAttention(store, rng, f"{name}.self", dim, heads)
        self.ln2 = LayerNorm(store, rng, f"{name}.ln2", dim)
        self.cross_attn = MultiHeadAttention(store, rng, f"{name}.cross", dim, heads)
        self.ln3 = LayerNorm(store, rng, f"{name}.ln3", dim)
        self.ffn = FeedForward(store, rng, f"{name}.ffn", dim)

    def __call__(self, x, c, causal, drop):
        x = add(x, drop(self.self_attn(self.ln1(x), self.ln1(x), causal)))
        x = add(x, drop(self.cross_attn(self.ln2(x), c, np.ones((1, 1, 1, 1)))))
        x = add(x, drop(self.ffn(self.ln3(x))))
        return x


# ---------------------------------------------------------------------------
# Model


class MPS2S:
    """Three perspective encoders plus a masked-cell autoregressive decoder."""

    def __init__(self, config: S2SConfig):
        self.config = config
        cfg = config
        rng = Rng(cfg.seed)
        from .codec import ParamStore  # shared registry type

        store = ParamStore()
        self.store = store
        d = cfg.model_dim
        vocab = cfg.get_vocab()

        if cfg.use_text:
            self.text_emb = store.add("text.emb", _uniform_init(rng, (vocab.size, d), d))
            self.text_pos = store.add("text.pos", _uniform_init(rng, (vocab.max_len, d), d))
            self.text_layers = [EncoderLayer(store, rng, f"text.enc{i}", d, cfg.heads)
                                for i in range(cfg.enc_layers)]
        if cfg.use_low:
            pdim = cfg.patch_size * cfg.patch_size * cfg.in_channels
            self.patch_w = store.add("low.proj.w", _uniform_init(rng, (pdim, d), pdim))
            self.patch_b = store.add("low.proj.b", np.zeros(d))
            self.patch_pos = store.add("low.pos", _uniform_init(rng, (cfg.n_patches, d), d))
            self.low_layers = [EncoderLayer(store, rng, f"low.enc{i}", d, cfg.heads)
                               for i in range(cfg.enc_layers)]
        if cfg.use_high:
            self.tok_w = store.add("high.proj.w", _uniform_init(rng, (cfg.latent_dim, d), cfg.latent_dim))
            self.tok_b = store.add("high.proj.b", np.zeros(d))
            self.mask_vec = store.add("high.mask_vec", _uniform_init(rng, (d,), d))
            self.high_pos = store.add("high.pos", _uniform_init(rng, (cfg.n_cells, d), d))
            self.high_layers = [EncoderLayer(store, rng, f"high.enc{i}", d, cfg.heads)
                                for i in range(cfg.enc_layers)]

        self.dec_emb = store.add("dec.emb", _uniform_init(rng, (cfg.codebook_size + 1, d), d))
        self.dec_pos = store.add("dec.pos", _uniform_init(rng, (cfg.n_cells, d), d))
        self.dec_layers = [DecoderLayer(store, rng, f"dec.l{i}", d, cfg.heads)
                           for i in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(store, rng, "dec.ln", d)
        self.head_w = store.add("dec.head.w", _uniform_init(rng, (d, cfg.codebook_size), d))
        self.head_b = store.add("dec.head.b", np.zeros(cfg.codebook_size))

        self.bos_id = cfg.codebook_size
        self._causal = np.tril(np.ones((cfg.n_cells, cfg.n_cells)))[None, None]

    def parameters(self):
        return self.store.tensors()

    def _drop(self, training, rng):
        if training and rng is not None and self.config.dropout > 0:
            return lambda t: dropout(t, self.config.dropout, rng, training=True)
        return lambda t: t

    # -- condition ----------------------------------------------------------
    def encode_condition(self, text_ids, image, tokens, latent_mask, codebook: np.ndarray,
                         training: bool = False, rng: Rng | None = None):
        """Concatenate the enabled perspective encodings along the sequence axis.

        ``image`` is the defective image with masked pixels zero-filled by the
        caller; ``codebook`` is the frozen codec codebook used to embed tokens.
        Returns (condition [N, Lc, D], segment length dict).
        """
        cfg = self.config
        drop = self._drop(training, rng)
        streams = []
        lengths = {"text": 0, "low": 0, "high": 0}
        n = None

        if cfg.use_text:
            ids = np.asarray(text_ids)
            n = ids.shape[0]
            x = add(embedding(self.text_emb, ids), self.text_pos)
            for layer in self.text_layers:
                x = layer(x, drop)
            streams.append(x)
            lengths["text"] = ids.shape[1]

        if cfg.use_low:
            img = as_tensor(image)
            n = img.shape[0] if n is None else n
            p, c = cfg.patch_size, cfg.in_channels
            hp = cfg.image_size // p
            x = reshape(img, (img.shape[0], c, hp, p, hp, p))
            x = reshape(transpose(x, (0, 2, 4, 1, 3, 5)), (img.shape[0], hp * hp, c * p * p))
            x = add(linear(x, self.patch_w, self.patch_b), self.patch_pos)
            for layer in self.low_layers:
                x = layer(x, drop)
            streams.append(x)
            lengths["low"] = hp * hp

        if cfg.use_high:
            toks = np.asarray(tokens).reshape(len(np.asarray(tokens)), -1)
            zm = np.asarray(latent_mask, dtype=np.float64).reshape(toks.shape)[..., None]
            n = toks.shape[0] if n is None else n
            emb = Tensor(np.asarray(codebook, dtype=np.float64)[toks])
            x = linear(emb, self.tok_w, self.tok_b)
            x = add(mul(x, 1.0 - zm), mul(self.mask_vec, zm))  # masked cells -> learned vector
            x = add(x, self.high_pos)
            for layer in self.high_layers:
                x = layer(x, drop)
            streams.append(x)
            lengths["high"] = toks.shape[1]

        return concat(streams, axis=1) if len(streams) > 1 else streams[0], lengths

    # -- decoder ------------------------------------------------------------
    def decoder_logits(self, condition, input_ids: np.ndarray,
                       training: bool = False, rng: Rng | None = None) -> Tensor:
        """Causal decoding over a BOS-shifted id sequence; [N, L, K] logits."""
        cfg = self.config
        ids = np.asarray(input_ids)
        if ids.ndim != 2 or ids.shape[1] != cfg.n_cells:
            raise ShapeError(f"decoder expects [N, {cfg.n_cells}] ids, got {ids.shape}")
        if ids.min() < 0 or ids.max() > self.bos_id:
            raise ShapeError(f"decoder ids out of range [0, {self.bos_id}]")
        drop = self._drop(training, rng)
        x = add(embedding(self.dec_emb, ids), self.dec_pos)
        for layer in self.dec_layers:
            x = layer(x, condition, self._causal, drop)
        return linear(self.dec_ln(x), self.head_w, self.head_b)

    def shifted_inputs(self, tokens: np.ndarray) -> np.ndarray:
        """[BOS, t_0, ..., t_{n-2}] per item, raster order."""
        flat = np.asarray(tokens).reshape(len(tokens), -1)
        bos = np.full((flat.shape[0], 1), self.bos_id, dtype=np.int64)
        return np.concatenate([bos, flat[:, :-1]], axis=1)

    def decode_masked_tokens(self, condition, tokens: np.ndarray, latent_mask: np.ndarray,
                             mode: str | None = None, rng: Rng | None = None,
                             temperature: float | None = None) -> np.ndarray:
        """Predict ids for masked cells in raster order; other cells untouched.

        Returns a grid shaped like ``tokens`` holding predictions at masked
        cells and 0 elsewhere (only the masked entries are meaningful).
        """
        cfg = self.config
        mode = mode or cfg.decode_mode
        temperature = cfg.temperature if temperature is None else temperature
        toks = np.asarray(tokens)
        zm = np.asarray(latent_mask)
        if toks.shape != zm.shape:
            raise ShapeError(f"token grid {toks.shape} does not match latent mask {zm.shape}")
        if toks.size and (toks.min() < 0 or toks.max() >= cfg.codebook_size):
            raise ShapeError(f"token ids out of codebook range [0, {cfg.codebook_size})")
        n = toks.shape[0]
        flat = toks.reshape(n, -1).astype(np.int64).copy()
        zm_flat = zm.reshape(n, -1)
        preds = np.zeros_like(flat)

        for k in range(cfg.n_cells):
            rows = np.where(zm_flat[:, k] == 1)[0]
            if rows.size == 0:
                continue
            logits = self.decoder_logits(condition, self.shifted_inputs(flat)).data[:, k]
            if mode == "greedy":
                chosen = np.argmax(logits, axis=1)  # first max: lowest id on ties
            else:
                probs = softmax(Tensor(logits / max(temperature, 1e-8)), axis=-1).data
                chosen = np.array([rng.categorical(probs[i]) for i in range(n)])
            flat[rows, k] = chosen[rows]
            preds[rows, k] = chosen[rows]
        return preds.reshape(toks.shape)


def merge_tokens(tokens: np.ndarray, predicted: np.ndarray, latent_mask: np.ndarray) -> np.ndarray:
    """Selective substitution: predictions at masked cells, originals elsewhere."""
    tokens = np.asarray(tokens)
    predicted = np.asarray(predicted)
    zm = np.asarray(latent_mask)
    if not (tokens.shape == predicted.shape == zm.shape):
        raise ShapeError(
            f"shape mismatch: tokens {tokens.shape}, predicted {predicted.shape}, mask {zm.shape}"
        )
    return (tokens * (1 - zm.astype(tokens.dtype)) + predicted * zm.astype(tokens.dtype)).astype(np.int64)


def masked_cross_entropy(logits, targets: np.ndarray, latent_mask: np.ndarray) -> Tensor:
    """Teacher-forced loss summed over masked cells, averaged over the batch."""
    targets = np.asarray(targets).reshape(logits.shape[0], -1)
    zm = np.asarray(latent_mask, dtype=np.float64).reshape(targets.shape)
    picked = gather_last(log_softmax(logits, axis=-1), targets)
    return mul(tensor_sum(mul(picked, zm)), -1.0 / targets.shape[0])


# ---------------------------------------------------------------------------
# Training


@dataclass
class S2STrainer:
    model: MPS2S
    total_steps: int
    lr: float = 3e-4
    step: int = 0
    opt: Adam = field(init=False)

    def __post_init__(self):
        self.opt = Adam(self.model.parameters(), lr=self.lr)
        self.warmup_steps = max(1, int(round(self.model.config.warmup_frac * self.total_steps)))
        self._codebook = None

    def lr_scale(self) -> float:
        return min(1.0, self.step / self.warmup_steps)

    def train_step(self, text_ids, defective_images, tokens, latent_mask, rng: Rng) -> dict:
        """One teacher-forced step on codec-produced token grids."""
        model = self.model
        self.step += 1
        toks = np.asarray(tokens)
        with record() as tape:
            cond, _ = model.encode_condition(text_ids, defective_images, toks, latent_mask,
                                             self._codebook, training=True, rng=rng)
            logits = model.decoder_logits(cond, model.shifted_inputs(toks), training=True, rng=rng)
            loss = masked_cross_entropy(logits, toks, latent_mask)
        tape.backward(loss)
        self.opt.step(lr_scale=self.lr_scale())
        self.opt.zero_grad()
        n_masked = int(np.asarray(latent_mask).sum())
        return {"step": self.step, "loss": float(loss.data), "masked_cells": n_masked}

    def set_codebook(self, codebook: np.ndarray) -> None:
        self._codebook = np.asarray(codebook, dtype=np.float64)


# ---------------------------------------------------------------------------
# Persistence


def save_s2s(path: str, model: MPS2S, step: int = 0) -> None:
    arrays = {name: t.data for name, t in model.store.named().items()}
    save_checkpoint(path, S2S_MAGIC, model.config.to_dict(), model.config.seed, step, arrays)


def load_s2s(path: str):
    magic, config, _seed, step, arrays = load_checkpoint(path)
    if magic != S2S_MAGIC:
        raise CheckpointError(f"not a seq2seq checkpoint (magic {magic!r})")
    model = MPS2S(S2SConfig.from_dict(config))
    model.store.load(arrays)
    return model, step
