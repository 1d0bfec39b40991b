"""The masked autoencoder: patchify, random masking, encoder, decoder.

Images are cut into a raster grid of non-overlapping square patches. A
random subset of patches is hidden; the encoder (a small pre-norm
transformer) sees only the visible patches plus learned positional
embeddings, and the decoder rebuilds the full patch grid from the encoder
output, a shared learned mask token, and decoder positional embeddings.

Parameters are plain numpy float32 arrays; forward passes wrap them in
autodiff Tensors on demand, so a frozen model can serve concurrent
reconstruction calls while training requires exclusive access.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .tensor import (
    Tensor,
    add,
    concat,
    embed_lookup,
    gelu,
    layernorm,
    masked_mse,
    matmul,
    mul,
    scale,
    slice_,
    softmax,
)


class ModelError(Exception):
    """Invalid model configuration or mismatched model inputs."""


class MaskRatioError(ModelError):
    """Mask ratio leaves zero masked or zero visible patches."""


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and capacity of one encoder or decoder."""

    image_side: int = 32
    channels: int = 1
    patch_side: int = 8
    embed_dim: int = 64
    encoder_layers: int = 4
    decoder_layers: int = 4
    heads: int = 2
    mask_ratio: float = 0.75
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ModelError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}"
            )
        if self.n_patches < 2:
            raise ModelError(f"need at least 2 patches, got {self.n_patches}")
        if not (0.0 < self.mask_ratio < 1.0):
            raise MaskRatioError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")
        m = masked_count(self.n_patches, self.mask_ratio)
        if not (1 <= m <= self.n_patches - 1):
            raise MaskRatioError(
                f"mask ratio {self.mask_ratio} masks {m} of {self.n_patches} patches"
            )
        if self.embed_dim % self.heads != 0:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ModelError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side * self.patch_side


def masked_count(n_patches: int, mask_ratio: float) -> int:
    """Number of hidden patches: round-half-up of ratio * n_patches."""
    return int(math.floor(mask_ratio * n_patches + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    """One masking draw: which patch indices are hidden."""

    n_patches: int
    masked: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if any(i < 0 or i >= self.n_patches for i in self.masked):
            raise ModelError(f"mask indices out of range for {self.n_patches} patches")
        if len(set(self.masked)) != len(self.masked):
            raise ModelError("mask indices must be distinct")

    @property
    def visible(self) -> tuple[int, ...]:
        hidden = set(self.masked)
        return tuple(i for i in range(self.n_patches) if i not in hidden)

    @property
    def n_masked(self) -> int:
        return len(self.masked)

    @property
    def n_visible(self) -> int:
        return self.n_patches - len(self.masked)


def sample_mask(n_patches: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Uniform subset without replacement; deterministic for a fixed seed."""
    m = masked_count(n_patches, mask_ratio)
    if not (1 <= m <= n_patches - 1):
        raise MaskRatioError(
            f"mask ratio {mask_ratio} would hide {m} of {n_patches} patches"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    masked = np.sort(rng.choice(n_patches, size=m, replace=False))
    return MaskPlan(n_patches=n_patches, masked=tuple(int(i) for i in masked), seed=seed)


# -- patch grid ----------------------------------------------------------------


def patchify(image: np.ndarray, patch_side: int) -> np.ndarray:
    """[c, s, s] -> [n_patches, c*ps*ps], patches in raster order."""
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ModelError(f"expected [c, s, s] image, got {image.shape}")
    c, s, _ = image.shape
    if s % patch_side != 0:
        raise ModelError(f"image side {s} not divisible by patch side {patch_side}")
    g = s // patch_side
    x = image.reshape(c, g, patch_side, g, patch_side)
    x = x.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x.reshape(g * g, c * patch_side * patch_side))


def unpatchify(patches: np.ndarray, channels: int, patch_side: int) -> np.ndarray:
    """Exact inverse of patchify."""
    n, d = patches.shape
    g = int(round(math.sqrt(n)))
    if g * g != n or d != channels * patch_side * patch_side:
        raise ModelError(f"cannot fold {patches.shape} back into an image")
    x = patches.reshape(g, g, channels, patch_side, patch_side)
    x = x.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(channels, g * patch_side, g * patch_side))


def patchify_batch(images: np.ndarray, patch_side: int) -> np.ndarray:
    """[b, c, s, s] -> [b, n_patches, patch_dim]."""
    b, c, s, _ = images.shape
    g = s // patch_side
    x = images.reshape(b, c, g, patch_side, g, patch_side)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, c * patch_side * patch_side))


def random_mask_arrays(
    rng: np.random.Generator, n_images: int, n_patches: int, mask_ratio: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized per-image mask draws for one training epoch.

    Same distribution as sample_mask (uniform subsets without replacement,
    via argsort of iid noise) but drawn from a shared stream, which keeps
    the per-epoch cost flat. Returns (vis_idx, restore_idx, mask) as in
    mask_arrays.
    """
    m = masked_count(n_patches, mask_ratio)
    if not (1 <= m <= n_patches - 1):
        raise MaskRatioError(f"mask ratio {mask_ratio} would hide {m} of {n_patches} patches")
    order = np.argsort(rng.random((n_images, n_patches)), axis=1)
    masked = np.sort(order[:, :m], axis=1)
    visible = np.sort(order[:, m:], axis=1)
    k = n_patches - m
    restore_idx = np.empty((n_images, n_patches), dtype=np.int64)
    np.put_along_axis(restore_idx, visible, np.broadcast_to(np.arange(k), (n_images, k)), axis=1)
    np.put_along_axis(
        restore_idx, masked, np.broadcast_to(k + np.arange(m), (n_images, m)), axis=1
    )
    mask = np.zeros((n_images, n_patches), dtype=np.float32)
    np.put_along_axis(mask, masked, 1.0, axis=1)
    return visible, restore_idx, mask


def mask_arrays(plans: list[MaskPlan]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-batch index arrays for one list of plans.

    Returns (vis_idx [b, k], restore_idx [b, n], mask [b, n]) where
    restore_idx maps each patch position to its row in the decoder's
    [visible..., masked...] token concatenation and mask flags hidden
    patches with 1.
    """
    n = plans[0].n_patches
    k = plans[0].n_visible
    b = len(plans)
    vis_idx = np.empty((b, k), dtype=np.int64)
    restore_idx = np.empty((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=np.float32)
    for i, plan in enumerate(plans):
        if plan.n_patches != n or plan.n_visible != k:
            raise ModelError("plans in one batch must share geometry and mask count")
        vis = np.fromiter(plan.visible, dtype=np.int64, count=k)
        msk = np.fromiter(plan.masked, dtype=np.int64, count=n - k)
        vis_idx[i] = vis
        restore_idx[i, vis] = np.arange(k)
        restore_idx[i, msk] = k + np.arange(n - k)
        mask[i, msk] = 1.0
    return vis_idx, restore_idx, mask


# -- parameters ----------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)


def _block_params(rng: np.random.Generator, prefix: str, dim: int, heads: int) -> dict[str, np.ndarray]:
    hidden = 4 * dim
    dh = dim // heads
    p = {
        f"{prefix}.ln1.g": np.ones(dim, dtype=np.float32),
        f"{prefix}.ln1.b": np.zeros(dim, dtype=np.float32),
        f"{prefix}.ln2.g": np.ones(dim, dtype=np.float32),
        f"{prefix}.ln2.b": np.zeros(dim, dtype=np.float32),
        f"{prefix}.mlp.w1": _xavier(rng, dim, hidden),
        f"{prefix}.mlp.b1": np.zeros(hidden, dtype=np.float32),
        f"{prefix}.mlp.w2": _xavier(rng, hidden, dim),
        f"{prefix}.mlp.b2": np.zeros(dim, dtype=np.float32),
        f"{prefix}.attn.wo": _xavier(rng, dim, dim),
        f"{prefix}.attn.bo": np.zeros(dim, dtype=np.float32),
    }
    # per-head projection weights: the head split costs nothing in the graph
    for h in range(heads):
        for name in ("q", "k", "v"):
            p[f"{prefix}.attn.w{name}{h}"] = _xavier(rng, dim, dh)
            p[f"{prefix}.attn.b{name}{h}"] = np.zeros(dh, dtype=np.float32)
    return p


def init_encoder_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    d = cfg.embed_dim
    params = {
        "patch.w": _xavier(rng, cfg.patch_dim, d),
        "patch.b": np.zeros(d, dtype=np.float32),
        "pos": (0.02 * rng.standard_normal((cfg.n_patches, d))).astype(np.float32),
    }
    for i in range(cfg.encoder_layers):
        params.update(_block_params(rng, f"block{i}", d, cfg.heads))
    params["ln.g"] = np.ones(d, dtype=np.float32)
    params["ln.b"] = np.zeros(d, dtype=np.float32)
    return params


def init_decoder_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    d = cfg.embed_dim
    params = {
        "adapter.w": _xavier(rng, d, d),
        "adapter.b": np.zeros(d, dtype=np.float32),
        "mask_token": (0.02 * rng.standard_normal((1, d))).astype(np.float32),
        "pos": (0.02 * rng.standard_normal((cfg.n_patches, d))).astype(np.float32),
        "head.w": _xavier(rng, d, cfg.patch_dim),
        "head.b": np.zeros(cfg.patch_dim, dtype=np.float32),
    }
    for i in range(cfg.decoder_layers):
        params.update(_block_params(rng, f"block{i}", d, cfg.heads))
    if cfg.decoder_layers >= 1:
        params["ln.g"] = np.ones(d, dtype=np.float32)
        params["ln.b"] = np.zeros(d, dtype=np.float32)
    return params


def wrap_params(params: dict[str, np.ndarray], trainable: bool) -> dict[str, Tensor]:
    """Wrap each parameter array exactly once for one forward/backward."""
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


@dataclass
class Encoder:
    cfg: ModelConfig
    params: dict[str, np.ndarray]


@dataclass
class Decoder:
    cfg: ModelConfig
    params: dict[str, np.ndarray]


@dataclass
class ModelPair:
    """An encoder/decoder pair plus the mask ratio used to drive it.

    The pair is immutable during inference; training code mutates the
    parameter arrays in place and requires exclusive access.
    """

    encoder: Encoder
    decoder: Decoder
    mask_ratio: float = field(default=0.0)

    def __post_init__(self):
        if self.mask_ratio == 0.0:
            self.mask_ratio = self.encoder.cfg.mask_ratio
        e, d = self.encoder.cfg, self.decoder.cfg
        if (e.image_side, e.channels, e.patch_side, e.embed_dim) != (
            d.image_side,
            d.channels,
            d.patch_side,
            d.embed_dim,
        ):
            raise ModelError("encoder and decoder geometry disagree")


def new_model_pair(cfg: ModelConfig, seed: int, decoder_cfg: ModelConfig | None = None) -> ModelPair:
    enc = Encoder(cfg, init_encoder_params(cfg, seed))
    dcfg = decoder_cfg or cfg
    dec = Decoder(dcfg, init_decoder_params(dcfg, seed + 1))
    return ModelPair(encoder=enc, decoder=dec, mask_ratio=cfg.mask_ratio)


# -- forward passes ------------------------------------------------------------


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float32) / np.float32(1.0 - rate)
    return mul(x, Tensor(keep))


def _attention(p: dict[str, Tensor], prefix: str, x: Tensor, heads: int) -> Tensor:
    dim = x.shape[-1]
    dh = dim // heads
    outs = []
    for h in range(heads):
        qh = add(matmul(x, p[f"{prefix}.attn.wq{h}"]), p[f"{prefix}.attn.bq{h}"])
        kh = add(matmul(x, p[f"{prefix}.attn.wk{h}"]), p[f"{prefix}.attn.bk{h}"])
        vh = add(matmul(x, p[f"{prefix}.attn.wv{h}"]), p[f"{prefix}.attn.bv{h}"])
        scores = scale(matmul(qh, kh, transpose_b=True), 1.0 / math.sqrt(dh))
        outs.append(matmul(softmax(scores), vh))
    o = concat(outs, axis=x.ndim - 1) if heads > 1 else outs[0]
    return add(matmul(o, p[f"{prefix}.attn.wo"]), p[f"{prefix}.attn.bo"])


def _block(
    p: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    heads: int,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    h = layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    a = _attention(p, prefix, h, heads)
    x = add(x, _dropout(a, dropout_rate, dropout_rng))
    h = layernorm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = add(matmul(h, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"])
    m = add(matmul(gelu(m), p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
    return add(x, _dropout(m, dropout_rate, dropout_rng))


def encoder_forward(
    cfg: ModelConfig,
    p: dict[str, Tensor],
    patches: np.ndarray,
    vis_idx: np.ndarray | None,
    dropout_rng: np.random.Generator | None = None,
    collect_layers: bool = False,
):
    """Embed (visible) patches and run the encoder blocks.

    `patches` is [b, n_patches, patch_dim]; `vis_idx` selects the visible
    patches per image, or None to process the full grid. Dropout (the
    training-time defense) fires only when a generator is supplied.
    """
    if vis_idx is not None:
        patches = np.take_along_axis(patches, vis_idx[:, :, None], axis=1)
    x = add(matmul(Tensor(patches), p["patch.w"]), p["patch.b"])
    if vis_idx is not None:
        x = add(x, embed_lookup(p["pos"], vis_idx))
    else:
        x = add(x, p["pos"])
    layers = []
    for i in range(cfg.encoder_layers):
        x = _block(p, f"block{i}", x, cfg.heads, cfg.dropout_rate, dropout_rng)
        if collect_layers:
            layers.append(x)
    x = layernorm(x, p["ln.g"], p["ln.b"])
    if collect_layers:
        return x, layers
    return x


def decoder_forward(
    cfg: ModelConfig,
    p: dict[str, Tensor],
    vis_emb: Tensor,
    restore_idx: np.ndarray,
) -> Tensor:
    """Fill masked slots with the mask token and predict every patch.

    With decoder_layers == 0 the path is adapter + linear head only, so the
    output is an affine function of the embeddings.
    """
    b, k, _ = vis_emb.shape
    n = restore_idx.shape[1]
    z = add(matmul(vis_emb, p["adapter.w"]), p["adapter.b"])
    if n > k:
        mtok = embed_lookup(p["mask_token"], np.zeros((b, n - k), dtype=np.int64))
        tokens = concat([z, mtok], axis=1)
    else:
        tokens = z
    x = embed_lookup(tokens, restore_idx)
    x = add(x, p["pos"])
    for i in range(cfg.decoder_layers):
        x = _block(p, f"block{i}", x, cfg.heads)
    if cfg.decoder_layers >= 1:
        x = layernorm(x, p["ln.g"], p["ln.b"])
    return add(matmul(x, p["head.w"]), p["head.b"])


def forward_loss(
    enc_cfg: ModelConfig,
    dec_cfg: ModelConfig,
    enc_t: dict[str, Tensor],
    dec_t: dict[str, Tensor],
    images: np.ndarray,
    plans: list[MaskPlan] | tuple[np.ndarray, np.ndarray, np.ndarray],
    scope: str = "masked-only",
    loss_norm: str = "pixel",
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """One masked reconstruction pass; returns (loss, prediction, target).

    `plans` is either a list of MaskPlans or a precomputed
    (vis_idx, restore_idx, mask) triple from random_mask_arrays.
    """
    patches = patchify_batch(images, enc_cfg.patch_side)
    if isinstance(plans, tuple):
        vis_idx, restore_idx, mask = plans
    else:
        vis_idx, restore_idx, mask = mask_arrays(plans)
    emb = encoder_forward(enc_cfg, enc_t, patches, vis_idx, dropout_rng=dropout_rng)
    pred = decoder_forward(dec_cfg, dec_t, emb, restore_idx)
    if scope == "full-image":
        weights = np.ones_like(mask)
    elif scope == "masked-only":
        weights = mask
    else:
        raise ModelError(f"unknown loss scope {scope!r}")
    loss = masked_mse(pred, Tensor(patches), weights, normalization=loss_norm)
    return loss, pred, patches


# -- public single-image operations ---------------------------------------------


def encode(encoder: Encoder, patches: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Embed the visible patches of one image; rows follow plan.visible."""
    if patches.shape[0] != plan.n_patches:
        raise ModelError(
            f"plan covers {plan.n_patches} patches but image has {patches.shape[0]}"
        )
    p = wrap_params(encoder.params, trainable=False)
    vis_idx = np.asarray(plan.visible, dtype=np.int64)[None, :]
    out = encoder_forward(encoder.cfg, p, patches[None], vis_idx)
    return out.data[0]


def decode(decoder: Decoder, visible_emb: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Reconstruct the full patch grid from visible-patch embeddings."""
    if visible_emb.shape[0] != plan.n_visible:
        raise ModelError(
            f"plan expects {plan.n_visible} visible embeddings, got {visible_emb.shape[0]}"
        )
    p = wrap_params(decoder.params, trainable=False)
    _, restore_idx, _ = mask_arrays([plan])
    emb = Tensor(np.asarray(visible_emb, dtype=np.float32)[None])
    out = decoder_forward(decoder.cfg, p, emb, restore_idx)
    return out.data[0]


def reconstruct(pair: ModelPair, image: np.ndarray, seed: int) -> tuple[np.ndarray, MaskPlan]:
    """patchify -> sample_mask -> encode -> decode for one image."""
    cfg = pair.encoder.cfg
    if image.shape != (cfg.channels, cfg.image_side, cfg.image_side):
        raise ModelError(
            f"image shape {image.shape} does not match configured geometry "
            f"({cfg.channels}, {cfg.image_side}, {cfg.image_side})"
        )
    plan = sample_mask(cfg.n_patches, pair.mask_ratio, seed)
    patches = patchify(image, cfg.patch_side)
    emb = encode(pair.encoder, patches, plan)
    return decode(pair.decoder, emb, plan), plan


# -- checkpoints -----------------------------------------------------------------

_CFG_FIELDS = (
    "image_side",
    "channels",
    "patch_side",
    "embed_dim",
    "encoder_layers",
    "decoder_layers",
    "heads",
    "mask_ratio",
    "dropout_rate",
)


def _cfg_header(cfg: ModelConfig, prefix: str) -> dict[str, str]:
    return {f"{prefix}.{name}": repr(getattr(cfg, name)) for name in _CFG_FIELDS}


def _cfg_from_header(header: dict[str, str], prefix: str) -> ModelConfig:
    kwargs = {}
    for name in _CFG_FIELDS:
        raw = header[f"{prefix}.{name}"]
        kwargs[name] = float(raw) if name in ("mask_ratio", "dropout_rate") else int(raw)
    return ModelConfig(**kwargs)


def save_model(path: str | Path, pair: ModelPair, seed: int | None = None) -> None:
    header = _cfg_header(pair.encoder.cfg, "encoder")
    header.update(_cfg_header(pair.decoder.cfg, "decoder"))
    header["mask_ratio"] = repr(pair.mask_ratio)
    if seed is not None:
        header["train_seed"] = str(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, arr in pair.encoder.params.items():
        tensors[f"enc.{name}"] = arr
    for name, arr in pair.decoder.params.items():
        tensors[f"dec.{name}"] = arr
    checkpoint.save_with_header(path, header, tensors)


def load_model(path: str | Path) -> ModelPair:
    header, tensors = checkpoint.load_with_header(path)
    enc_cfg = _cfg_from_header(header, "encoder")
    dec_cfg = _cfg_from_header(header, "decoder")
    enc_params = {k[4:]: v for k, v in tensors.items() if k.startswith("enc.")}
    dec_params = {k[4:]: v for k, v in tensors.items() if k.startswith("dec.")}
    return ModelPair(
        encoder=Encoder(enc_cfg, enc_params),
        decoder=Decoder(dec_cfg, dec_params),
        mask_ratio=float(header["mask_ratio"]),
    )


def with_dropout(cfg: ModelConfig, rate: float) -> ModelConfig:
    return replace(cfg, dropout_rate=rate)
