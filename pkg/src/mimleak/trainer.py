"""Masked-autoencoder pre-training and decoder-only fine-tuning.

The optimizer is Adam with decoupled weight decay; the weight-decay knob
doubles as the L2 defense and the dropout knob (applied inside encoder
blocks) as the Dropout defense. Every image gets a fresh random mask each
epoch. Gradients are clipped at a global norm before each step so a hot
learning rate degrades into slow progress instead of a NaN abort.

Training is deterministic for a fixed seed: batch order, mask draws and
dropout all derive from one PCG64 stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    Decoder,
    Encoder,
    ModelConfig,
    ModelPair,
    clone_params,
    forward_loss,
    new_model_pair,
    params_checksum,
    random_mask_arrays,
    wrap_params,
)
from .tensor import backward, no_finite_checks


class TrainError(Exception):
    """Invalid training configuration."""


class NonFiniteLossError(TrainError):
    """Training aborted on a NaN/Inf loss; reports epoch and batch."""


class FrozenEncoderError(TrainError):
    """An encoder parameter changed while it was supposed to be frozen."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one optimization run."""

    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    dropout_rate: float | None = None
    seed: int = 0
    freeze_encoder: bool = False
    warmup_epochs: int = 5
    grad_clip: float | None = 1.0
    loss_norm: str = "pixel"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        # epochs == 0 is meaningful only for fine-tuning (identity budget);
        # pretrain() rejects it.
        if self.epochs < 0:
            raise TrainError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise TrainError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class TrainLog:
    """Per-epoch mean reconstruction loss and wall time."""

    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,seconds"]
        for i, (loss, sec) in enumerate(zip(self.losses, self.seconds), start=1):
            lines.append(f"{i},{loss!r},{sec:.3f}")
        return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    lr: float | None = None,
) -> None:
    """One Adam update with decoupled weight decay, in place.

    Parameters without a gradient this step are only decayed. Weight decay
    skips nothing: it is the caller's choice which parameter dicts to pass.
    """
    lr = config.learning_rate if lr is None else lr
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if config.weight_decay > 0.0:
            p *= 1.0 - lr * config.weight_decay
        if g is None:
            continue
        if g.shape != p.shape:
            raise TrainError(f"gradient shape {g.shape} mismatches parameter {name} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= lr / c1
        p -= denom


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        return config.learning_rate * (epoch + 1) / config.warmup_epochs
    return config.learning_rate


def _collect_grads(wrapped: dict) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in wrapped.items() if t.grad is not None}




def _run_epochs(
    enc: Encoder,
    dec: Decoder,
    images: np.ndarray,
    config: TrainConfig,
    mask_ratio: float,
    train_encoder: bool,
    snapshot_epochs: set[int],
) -> tuple[TrainLog, dict[int, ModelPair]]:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = len(images)
    enc_state = AdamState.for_params(enc.params) if train_encoder else None
    dec_state = AdamState.for_params(dec.params)
    log = TrainLog()
    snapshots: dict[int, ModelPair] = {}
    enc_checksum = params_checksum(enc.params) if not train_encoder else None

    use_dropout = enc.cfg.dropout_rate > 0.0 and train_encoder
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = _epoch_lr(config, epoch)
        order = rng.permutation(n)
        vis_all, restore_all, mask_all = random_mask_arrays(
            rng, n, enc.cfg.n_patches, mask_ratio
        )
        dropout_rng = (
            np.random.Generator(np.random.PCG64(int(rng.integers(0, 2**63 - 1))))
            if use_dropout
            else None
        )
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch_n = order[start : start + config.batch_size]
            with no_finite_checks():
                enc_t = wrap_params(enc.params, trainable=train_encoder)
                dec_t = wrap_params(dec.params, trainable=True)
                loss, _, _ = forward_loss(
                    enc.cfg,
                    dec.cfg,
                    enc_t,
                    dec_t,
                    images[batch_n],
                    (vis_all[batch_n], restore_all[batch_n], mask_all[batch_n]),
                    loss_norm=config.loss_norm,
                    dropout_rng=dropout_rng,
                )
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch + 1}, batch {start // config.batch_size + 1}"
                )
            backward(loss)
            grads = _collect_grads(dec_t)
            if train_encoder:
                enc_grads = _collect_grads(enc_t)
                merged = dict(grads)
                merged.update({f"enc::{k}": v for k, v in enc_grads.items()})
                if config.grad_clip is not None:
                    clip_gradients(merged, config.grad_clip)
                adam_step(dec.params, {k: v for k, v in merged.items() if not k.startswith("enc::")}, dec_state, config, lr)
                adam_step(
                    enc.params,
                    {k[5:]: v for k, v in merged.items() if k.startswith("enc::")},
                    enc_state,
                    config,
                    lr,
                )
            else:
                if config.grad_clip is not None:
                    clip_gradients(grads, config.grad_clip)
                adam_step(dec.params, grads, dec_state, config, lr)
            total += value * len(batch_n)
        log.losses.append(total / n)
        log.seconds.append(time.perf_counter() - started)
        if (epoch + 1) in snapshot_epochs:
            snapshots[epoch + 1] = ModelPair(
                encoder=Encoder(enc.cfg, clone_params(enc.params)),
                decoder=Decoder(dec.cfg, clone_params(dec.params)),
                mask_ratio=mask_ratio,
            )

    if enc_checksum is not None and params_checksum(enc.params) != enc_checksum:
        raise FrozenEncoderError("encoder parameters changed during decoder-only training")
    return log, snapshots


def pretrain(
    model_cfg: ModelConfig,
    config: TrainConfig,
    images: np.ndarray,
    decoder_cfg: ModelConfig | None = None,
    snapshot_epochs: tuple[int, ...] = (),
) -> tuple[ModelPair, TrainLog, dict[int, ModelPair]]:
    """Train a fresh encoder/decoder pair on `images` (already normalized).

    Returns the trained pair, the per-epoch log and any requested parameter
    snapshots (copies taken at the end of the listed epochs).
    """
    if len(images) == 0:
        raise TrainError("cannot pretrain on an empty image set")
    if config.epochs < 1:
        raise TrainError("pretraining needs at least one epoch")
    if config.dropout_rate is not None:
        model_cfg = replace(model_cfg, dropout_rate=config.dropout_rate)
    pair = new_model_pair(model_cfg, config.seed, decoder_cfg)
    bad = [e for e in snapshot_epochs if not (1 <= e <= config.epochs)]
    if bad:
        raise TrainError(f"snapshot epochs {bad} outside 1..{config.epochs}")
    log, snapshots = _run_epochs(
        pair.encoder,
        pair.decoder,
        images,
        config,
        model_cfg.mask_ratio,
        train_encoder=True,
        snapshot_epochs=set(snapshot_epochs),
    )
    return pair, log, snapshots


def finetune_decoder(
    target_encoder: Encoder,
    shadow_decoder: Decoder,
    images: np.ndarray,
    config: TrainConfig,
    mask_ratio: float | None = None,
) -> tuple[Decoder, TrainLog]:
    """Adapt a copy of `shadow_decoder` to a frozen `target_encoder`.

    The encoder is never updated (checked by checksum); gradients cannot
    reach it because its parameters enter the graph as constants. With
    epochs == 0 the returned decoder equals the input.
    """
    if not config.freeze_encoder:
        raise TrainError("finetune_decoder requires freeze_encoder=true")
    decoder = Decoder(shadow_decoder.cfg, clone_params(shadow_decoder.params))
    if config.epochs == 0:
        return decoder, TrainLog()
    ratio = target_encoder.cfg.mask_ratio if mask_ratio is None else mask_ratio
    log, _ = _run_epochs(
        target_encoder,
        decoder,
        images,
        config,
        ratio,
        train_encoder=False,
        snapshot_epochs=set(),
    )
    return decoder, log
