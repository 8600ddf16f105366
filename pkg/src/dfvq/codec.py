"""Defect-free vector-quantized codec.

The encoder runs two weight-sharing paths per downsampling level: a plain
path and a mask-aware path whose ops never read defective positions. The
merged hidden state takes the mask-aware value inside the (downsampled)
defective region and the plain value outside it, and the mask itself evolves
by any-defective max pooling in lockstep with the strided convolutions.

The decoder is a plain upsampling stack; at each level its state is mixed
with the encoder hidden of the same resolution on non-defective cells
(coefficient tau, with an exact-copy sentinel at the pixel level), so
non-defective pixels of the output equal the encoder input bit for bit.

Architectural constraint worth knowing: the first level keeps its receptive
field inside the stride-2 pooling footprint (kernel-2 convolution only, no
normalization or attention). A cell that survives the mask pool therefore
never sees a defective pixel on either path, and every later level consumes
an already defect-independent merged state, which is what makes the latent
at masked positions exactly invariant to defective pixel values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .features import feature_map, feature_net
from .masked import df_conv2d, df_norm, mask_downsample, masked_attention, validate_mask
from .optim import Adam
from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    conv2d,
    embedding,
    leaky_relu,
    linear,
    log,
    mul,
    nearest_upsample,
    record,
    reshape,
    sigmoid,
    stop_gradient,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)

CODEC_MAGIC = b"DFVQ"


@dataclass
class CodecConfig:
    image_size: int = 32
    in_channels: int = 3
    channels: tuple = (16, 32, 64)
    latent_dim: int = 32
    codebook_size: int = 64
    norm_eps: float = 1e-5
    norm_groups: int = 1
    tau: tuple = (1.0, 1.0, 1.0)  # latent-level mixing for levels 1..T; level 0 is an exact copy
    use_attention: bool = True
    use_relative_estimation: bool = True
    use_symmetrical_connection: bool = True
    inference_plain_path: bool = True
    recon_weight: float = 1.0
    vq_weight: float = 1.0
    perceptual_weight: float = 1.0
    gan_weight: float = 1.0
    gan_warmup_frac: float = 0.25
    feature_seed: int = 1618
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.tau = tuple(self.tau)
        if len(self.tau) != len(self.channels):
            raise ValueError(f"need one tau per level, got {len(self.tau)} for {len(self.channels)} levels")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        if self.image_size % (2 ** len(self.channels)):
            raise ValueError(f"image size {self.image_size} not divisible by total stride")

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    @property
    def latent_size(self) -> int:
        return self.image_size // (2 ** self.num_levels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown codec config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale_reference(cls) -> "CodecConfig":
        """Published-scale preset (256x256 -> 32x32, 8192 codes). Documented
        for reference only; nothing in this repo trains or tests at this size."""
        return cls(image_size=256, channels=(64, 128, 256), latent_dim=256,
                   codebook_size=8192, tau=(1.0, 1.0, 1.0))


@dataclass
class EncodeResult:
    z: Tensor
    trace: list  # hidden states h_0 .. h_T (h_0 is the input image)
    pyramid: list  # masks m_0 .. m_T


@dataclass
class DecodeResult:
    image: Tensor
    pre_copy: Tensor  # decoder state at pixel level before the exact-copy merge


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [N, h, w] int64
    latent_mask: np.ndarray  # [N, h, w] binary


class ParamStore:
    """Insertion-ordered name -> parameter registry."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter '{name}'")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def named(self) -> dict[str, Tensor]:
        return dict(self._params)

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self._params.items() if n.startswith(prefix)]

    def load(self, arrays: dict) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise CheckpointError(f"array '{name}' has shape {arr.shape}, expected {t.data.shape}")
            t.data = arr


def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape) * 2.0 * bound - bound


# ---------------------------------------------------------------------------
# Layers (plain / mask-aware pairs sharing the same parameters)


class Conv:
    def __init__(self, store, rng, name, cin, cout, k, stride=1, pad=0):
        self.w = store.add(f"{name}.w", _uniform_init(rng, (cout, cin, k, k), cin * k * k))
        self.b = store.add(f"{name}.b", np.zeros(cout))
        self.stride, self.pad = stride, pad
        self.downsamples = stride > 1

    def plain(self, x):
        return conv2d(x, self.w, self.b, self.stride, self.pad)

    def masked(self, x, m):
        return df_conv2d(x, m, self.w, self.b, self.stride, self.pad)


class Norm:
    def __init__(self, eps, groups):
        self.eps, self.groups = eps, groups
        self.downsamples = False

    def plain(self, x):
        empty = np.zeros((x.shape[0], x.shape[2], x.shape[3]))
        return df_norm(x, empty, self.eps, self.groups)

    def masked(self, x, m):
        return df_norm(x, m, self.eps, self.groups)


class Act:
    downsamples = False

    def plain(self, x):
        return leaky_relu(x, 0.2)

    def masked(self, x, m):
        return leaky_relu(x, 0.2)


class SpatialAttention:
    """Residual single-head self-attention over flattened spatial cells."""

    def __init__(self, store, rng, name, channels):
        c = channels
        self.wq = store.add(f"{name}.wq", _uniform_init(rng, (c, c), c))
        self.wk = store.add(f"{name}.wk", _uniform_init(rng, (c, c), c))
        self.wv = store.add(f"{name}.wv", _uniform_init(rng, (c, c), c))
        self.wo = store.add(f"{name}.wo", _uniform_init(rng, (c, c), c))
        self.bo = store.add(f"{name}.bo", np.zeros(c))
        self.downsamples = False

    def _run(self, x, m):
        n, c, h, w = x.shape
        seq = reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))
        q, k, v = linear(seq, self.wq), linear(seq, self.wk), linear(seq, self.wv)
        allowed = np.ones((n, 1, h * w)) if m is None else (1.0 - m.reshape(n, 1, h * w))
        att = masked_attention(q, k, v, allowed)
        out = linear(att, self.wo, self.bo)
        out = transpose(reshape(out, (n, h, w, c)), (0, 3, 1, 2))
        return add(x, out)

    def plain(self, x):
        return self._run(x, None)

    def masked(self, x, m):
        return self._run(x, m)


def _run_level(items, x, m, use_masked_ops):
    """Apply one level; the mask evolves at each strided convolution."""
    for item in items:
        x = item.masked(x, m) if use_masked_ops else item.plain(x)
        if item.downsamples:
            m = mask_downsample(m, item.stride)
    return x, m


def _merge(valid_side, defective_side, m):
    """valid_side where m == 0, defective_side where m == 1 (channels share m)."""
    mb = m[:, None]
    return add(mul(valid_side, 1.0 - mb), mul(defective_side, mb))


# ---------------------------------------------------------------------------
# Codec


class PatchDiscriminator:
    def __init__(self, store, rng, in_channels):
        self.c1 = Conv(store, rng, "disc.c1", in_channels, 16, 3, 2, 1)
        self.c2 = Conv(store, rng, "disc.c2", 16, 32, 3, 2, 1)
        self.c3 = Conv(store, rng, "disc.c3", 32, 1, 3, 1, 1)

    def __call__(self, x) -> Tensor:
        h = leaky_relu(self.c1.plain(x), 0.2)
        h = leaky_relu(self.c2.plain(h), 0.2)
        return sigmoid(self.c3.plain(h))


class DefectFreeCodec:
    """Encoder/decoder pair with shared-parameter dual paths and a codebook."""

    def __init__(self, config: CodecConfig):
        self.config = config
        rng = Rng(config.seed)
        store = ParamStore()
        self.store = store
        cfg = config

        chans = (cfg.in_channels,) + cfg.channels
        t_levels = cfg.num_levels
        self.enc_levels = []
        for i in range(1, t_levels + 1):
            name = f"enc.l{i}"
            items = []
            if i > 1:
                # level 1 stays norm/attention free: its plain path must not
                # see beyond the stride-2 footprint of each surviving cell
                items.append(Norm(cfg.norm_eps, cfg.norm_groups))
            items.append(Conv(store, rng, f"{name}.down", chans[i - 1], chans[i], 2, 2, 0))
            items.append(Act())
            if i == t_levels and cfg.use_attention:
                items.append(SpatialAttention(store, rng, f"{name}.attn", chans[i]))
            if i > 1:
                items.append(Conv(store, rng, f"{name}.conv", chans[i], chans[i], 3, 1, 1))
                items.append(Act())
            if i == t_levels:
                items.append(Conv(store, rng, f"{name}.proj", chans[i], cfg.latent_dim, 1, 1, 0))
            self.enc_levels.append(items)

        self.dec_levels = []
        for i in range(1, t_levels + 1):
            name = f"dec.l{i}"
            items = []
            if i == t_levels:
                items.append(Conv(store, rng, f"{name}.proj", cfg.latent_dim, chans[i], 1, 1, 0))
                if cfg.use_attention:
                    items.append(SpatialAttention(store, rng, f"{name}.attn", chans[i]))
                items.append(Norm(cfg.norm_eps, cfg.norm_groups))
                items.append(Act())
            items.append(Conv(store, rng, f"{name}.conv", chans[i], chans[i], 3, 1, 1))
            if 1 < i < t_levels:
                items.append(Norm(cfg.norm_eps, cfg.norm_groups))
            items.append(Act())
            up = Conv(store, rng, f"{name}.up", chans[i], chans[i - 1], 3, 1, 1)
            items.append(("upsample", up))
            self.dec_levels.append(items)

        self.codebook = store.add(
            "codebook",
            _uniform_init(rng, (cfg.codebook_size, cfg.latent_dim), cfg.codebook_size),
        )
        self.disc = PatchDiscriminator(store, rng, cfg.in_channels)
        self.q_layers = feature_net(cfg.feature_seed)

    # -- parameter groups ---------------------------------------------------
    def generator_params(self) -> list[Tensor]:
        return self.store.tensors("enc.") + self.store.tensors("dec.") + [self.codebook]

    def discriminator_params(self) -> list[Tensor]:
        return self.store.tensors("disc.")

    # -- encoding -----------------------------------------------------------
    def encode_defect_free(self, image, mask, use_plain_path: bool = True) -> EncodeResult:
        """Iterative dual-path downsampling with mask evolution."""
        x = as_tensor(image)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.image_size:
            raise ShapeError(f"expected [N,{cfg.in_channels},{cfg.image_size},{cfg.image_size}] image, got {x.shape}")
        m = validate_mask(mask)
        if m.shape != (x.shape[0], cfg.image_size, cfg.image_size):
            raise ShapeError(f"mask shape {m.shape} does not match image {x.shape}")

        h = x
        trace = [h]
        pyramid = [m]
        for items in self.enc_levels:
            hx, m_next = _run_level(items, h, m, cfg.use_relative_estimation)
            if use_plain_path:
                hy, _ = _run_level(items, h, m, False)
                h = _merge(hy, hx, m_next)
            else:
                h = hx
            m = m_next
            trace.append(h)
            pyramid.append(m)
        return EncodeResult(z=h, trace=trace, pyramid=pyramid)

    # -- decoding -----------------------------------------------------------
    def _check_trace(self, trace, pyramid):
        cfg = self.config
        if len(trace) != cfg.num_levels + 1 or len(pyramid) != cfg.num_levels + 1:
            raise ShapeError(
                f"trace/pyramid must hold {cfg.num_levels + 1} levels, got {len(trace)}/{len(pyramid)}"
            )
        size = cfg.image_size
        for i, (h, m) in enumerate(zip(trace, pyramid)):
            if h.shape[2] != size >> i or m.shape[1] != size >> i:
                raise ShapeError(f"trace level {i} has resolution {h.shape[2]}, expected {size >> i}")

    def decode_symmetric(self, latent, trace, pyramid) -> DecodeResult:
        """Upsample from the latent, mixing in encoder hiddens on valid cells."""
        cfg = self.config
        self._check_trace(trace, pyramid)
        h_hat = as_tensor(latent)
        if h_hat.shape != trace[-1].shape:
            raise ShapeError(f"latent shape {h_hat.shape} does not match trace top {trace[-1].shape}")
        for i in range(cfg.num_levels, 0, -1):
            if cfg.use_symmetrical_connection:
                tau = cfg.tau[i - 1]
                mixed = mul(add(h_hat, mul(trace[i], tau)), 1.0 / (tau + 1.0))
                h_hat = _merge(mixed, h_hat, pyramid[i])
            items = self.dec_levels[i - 1]
            for item in items:
                if isinstance(item, tuple):  # nearest upsample then conv
                    h_hat = item[1].plain(nearest_upsample(h_hat, 2))
                else:
                    h_hat = item.plain(h_hat)
        h_hat = sigmoid(h_hat)
        pre_copy = h_hat
        if cfg.use_symmetrical_connection:
            out = _merge(trace[0], h_hat, pyramid[0])
        else:
            out = h_hat
        return DecodeResult(image=out, pre_copy=pre_copy)

    def decode_tokens(self, tokens: np.ndarray, trace, pyramid) -> DecodeResult:
        latent = embed_tokens(self.codebook, tokens)
        return self.decode_symmetric(latent, trace, pyramid)


# ---------------------------------------------------------------------------
# Quantization


def quantize(z, codebook):
    """Nearest codebook entry per latent cell (ties break to the lowest index).

    Returns (tokens [N,h,w], quantized [N,d,h,w], (codebook_term, commit_term)).
    The quantized tensor carries gradient to the codebook; the two scalar
    terms implement the stop-gradient pair of the VQ objective.
    """
    z = as_tensor(z)
    codebook = as_tensor(codebook)
    if z.ndim != 4:
        raise ShapeError(f"expected [N,d,h,w] latent, got {z.shape}")
    n, d, h, w = z.shape
    if codebook.shape[1] != d:
        raise ShapeError(f"latent dim {d} != codebook dim {codebook.shape[1]}")

    cells = reshape(transpose(z, (0, 2, 3, 1)), (n * h * w, d))
    diffs = cells.data[:, None, :] - codebook.data[None, :, :]
    tokens = np.argmin(np.sum(diffs * diffs, axis=-1), axis=1)

    quant_cells = embedding(codebook, tokens)
    code_diff = sub(stop_gradient(cells), quant_cells)
    commit_diff = sub(cells, stop_gradient(quant_cells))
    code_term = tensor_mean(tensor_sum(mul(code_diff, code_diff), axis=-1))
    commit_term = tensor_mean(tensor_sum(mul(commit_diff, commit_diff), axis=-1))

    quantized = transpose(reshape(quant_cells, (n, h, w, d)), (0, 3, 1, 2))
    return tokens.reshape(n, h, w), quantized, (code_term, commit_term)


def straight_through(z, quantized) -> Tensor:
    """Quantized values forward, identity gradient to the latent backward."""
    return add(z, stop_gradient(sub(quantized, z)))


def embed_tokens(codebook, tokens: np.ndarray) -> Tensor:
    """Codebook lookup of a [N,h,w] token grid into a [N,d,h,w] latent."""
    codebook = as_tensor(codebook)
    tokens = np.asarray(tokens)
    n, h, w = tokens.shape
    flat = embedding(codebook, tokens.reshape(-1))
    return transpose(reshape(flat, (n, h, w, codebook.shape[1])), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Losses


def vq_losses(image, recon, vq_terms, q_features, d_outputs):
    """(L_V, L_P, L_G): reconstruction+codebook, perceptual, adversarial."""
    image, recon = as_tensor(image), as_tensor(recon)
    diff = sub(image, recon)
    l_v = add(tensor_mean(mul(diff, diff)), add(vq_terms[0], vq_terms[1]))
    q_real, q_fake = q_features
    q_diff = sub(as_tensor(q_real), as_tensor(q_fake))
    l_p = tensor_mean(mul(q_diff, q_diff))
    d_real, d_fake = d_outputs
    l_g = add(tensor_mean(log(d_real)), tensor_mean(log(sub(1.0, d_fake))))
    return l_v, l_p, l_g


# ---------------------------------------------------------------------------
# Training


@dataclass
class CodecTrainer:
    codec: DefectFreeCodec
    total_steps: int
    lr: float = 1e-3
    disc_lr: float = 1e-4
    step: int = 0
    gen_opt: Adam = field(init=False)
    disc_opt: Adam = field(init=False)

    def __post_init__(self):
        self.gen_opt = Adam(self.codec.generator_params(), lr=self.lr)
        self.disc_opt = Adam(self.codec.discriminator_params(), lr=self.disc_lr)
        frac = self.codec.config.gan_warmup_frac
        self.warmup_steps = int(round(frac * self.total_steps))

    def train_step(self, images: np.ndarray, masks: np.ndarray) -> dict:
        """One generator update and (past warm-up) one discriminator update."""
        codec = self.codec
        cfg = codec.config
        self.step += 1
        gan_on = self.step > self.warmup_steps

        image_t = Tensor(np.asarray(images, dtype=np.float64))
        with record() as tape:
            enc = codec.encode_defect_free(image_t, masks)
            tokens, quantized, vq_terms = quantize(enc.z, codec.codebook)
            dec_in = straight_through(enc.z, quantized)
            dec = codec.decode_symmetric(dec_in, enc.trace, enc.pyramid)

            q_real = feature_map(codec.q_layers, image_t)
            q_fake = feature_map(codec.q_layers, dec.image)
            d_fake = codec.disc(dec.image)

            diff = sub(image_t, dec.image)
            recon_mse = tensor_mean(mul(diff, diff))
            l_v = add(mul(recon_mse, cfg.recon_weight),
                      mul(add(vq_terms[0], vq_terms[1]), cfg.vq_weight))
            l_p = mul(tensor_mean(mul(sub(q_real, q_fake), sub(q_real, q_fake))), cfg.perceptual_weight)
            gen_gan = mul(tensor_mean(log(d_fake)), -1.0)  # non-saturating
            loss_gen = add(add(l_v, l_p), mul(gen_gan, cfg.gan_weight if gan_on else 0.0))
        tape.backward(loss_gen)
        self.gen_opt.step()
        self.gen_opt.zero_grad()
        self.disc_opt.zero_grad()

        recon_const = Tensor(dec.image.data)
        if gan_on:
            with record() as tape_d:
                d_real_t = codec.disc(image_t)
                d_fake_t = codec.disc(recon_const)
                l_g_val = add(tensor_mean(log(d_real_t)), tensor_mean(log(sub(1.0, d_fake_t))))
                loss_disc = mul(l_g_val, -1.0)  # discriminator maximizes L_G
            tape_d.backward(loss_disc)
            self.disc_opt.step()
            self.disc_opt.zero_grad()
            self.gen_opt.zero_grad()
            l_g = float(l_g_val.data)
        else:
            d_real_t = codec.disc(image_t)
            d_fake_t = codec.disc(recon_const)
            l_g = float(tensor_mean(log(d_real_t)).data + tensor_mean(log(sub(1.0, d_fake_t))).data)

        usage = len(np.unique(tokens)) / cfg.codebook_size
        l_v_f, l_p_f = float(l_v.data), float(l_p.data)
        return {
            "step": self.step,
            "recon_mse": float(recon_mse.data),
            "loss_v": l_v_f,
            "loss_p": l_p_f,
            "loss_g": l_g,
            "loss_total": l_v_f + l_p_f + l_g,
            "gen_gan_active": gan_on,
            "codebook_usage": usage,
        }


# ---------------------------------------------------------------------------
# Persistence


def save_codec(path: str, codec: DefectFreeCodec, step: int = 0) -> None:
    arrays = {name: t.data for name, t in codec.store.named().items()}
    for i, (w, b, _, _) in enumerate(codec.q_layers):
        arrays[f"q.l{i}.w"] = w.data
        arrays[f"q.l{i}.b"] = b.data
    save_checkpoint(path, CODEC_MAGIC, codec.config.to_dict(), codec.config.seed, step, arrays)


def load_codec(path: str):
    """Returns (codec, step). Raises CheckpointError on wrong magic/shapes."""
    magic, config, _seed, step, arrays = load_checkpoint(path)
    if magic != CODEC_MAGIC:
        raise CheckpointError(f"not a codec checkpoint (magic {magic!r})")
    config["channels"] = tuple(config["channels"])
    config["tau"] = tuple(config["tau"])
    codec = DefectFreeCodec(CodecConfig.from_dict(config))
    codec.store.load({k: v for k, v in arrays.items() if not k.startswith("q.")})
    for i, (w, b, _, _) in enumerate(codec.q_layers):
        w.data = np.asarray(arrays[f"q.l{i}.w"], dtype=np.float64)
        b.data = np.asarray(arrays[f"q.l{i}.b"], dtype=np.float64)
    return codec, step
