"""The four comparison attacks scored side by side with the main attack.

  A: attack a downstream classifier built on the frozen encoder, using a
     binary classifier over its (sorted) posteriors.
  B: white-box features — the encoder's mean-pooled output embedding
     concatenated with every block's mean-pooled activations — fed to a
     binary classifier.
  C: Shannon entropy of the softmax-normalized mean-pooled embedding,
     thresholded like the main attack.
  D: embedding stability under repeated random masking: the mean pairwise
     distance over k masked forward passes, thresholded.

All four emit AttackReports in the same schema as the main attack so a
single table can compare them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import (
    AttackReport,
    ScoreRecord,
    Threshold,
    balanced_accuracy,
    build_report,
    search_threshold,
)
from .model import Encoder, encoder_forward, mask_arrays, patchify_batch, sample_mask, wrap_params
from .tensor import Tensor, add, backward, gelu, masked_mse, matmul, softmax
from .trainer import AdamState, TrainConfig, adam_step


class BaselineError(Exception):
    """Invalid baseline inputs."""


@dataclass
class LabeledSet:
    """Images plus their dataset indices, used as evaluation material."""

    images: np.ndarray
    ids: np.ndarray


@dataclass
class EvalSets:
    """The four image groups every attack scores."""

    shadow_members: LabeledSet
    shadow_nonmembers: LabeledSet
    target_members: LabeledSet
    target_nonmembers: LabeledSet


# -- tiny classifiers ------------------------------------------------------------


def _onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


class BinaryAttackClassifier:
    """input_dim -> 32 -> 2 feed-forward net with softmax output.

    Trained full-batch with Adam on the Brier score (squared error against
    one-hot labels), which keeps the loss inside the op set and still
    drives the outputs toward calibrated probabilities.
    """

    HIDDEN = 32

    def __init__(self, input_dim: int, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(seed))
        a1 = np.sqrt(6.0 / (input_dim + self.HIDDEN))
        a2 = np.sqrt(6.0 / (self.HIDDEN + 2))
        self.params = {
            "w1": rng.uniform(-a1, a1, size=(input_dim, self.HIDDEN)).astype(np.float32),
            "b1": np.zeros(self.HIDDEN, dtype=np.float32),
            "w2": rng.uniform(-a2, a2, size=(self.HIDDEN, 2)).astype(np.float32),
            "b2": np.zeros(2, dtype=np.float32),
        }
        self.loss_log: list[float] = []

    def _forward(self, x: np.ndarray, wrapped: dict[str, Tensor]) -> Tensor:
        h = gelu(add(matmul(Tensor(x), wrapped["w1"]), wrapped["b1"]))
        return softmax(add(matmul(h, wrapped["w2"]), wrapped["b2"]))

    def train(self, features: np.ndarray, labels: np.ndarray, epochs: int = 300, lr: float = 1e-2) -> None:
        x = np.asarray(features, dtype=np.float32)
        y = _onehot(np.asarray(labels, dtype=np.int64), 2)
        cfg = TrainConfig(epochs=max(epochs, 1), batch_size=len(x), learning_rate=lr, seed=0)
        state = AdamState.for_params(self.params)
        mask = np.ones(len(x), dtype=np.float32)
        for _ in range(epochs):
            wrapped = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
            probs = self._forward(x, wrapped)
            loss = masked_mse(probs, Tensor(y), mask)
            backward(loss)
            grads = {k: t.grad for k, t in wrapped.items()}
            adam_step(self.params, grads, state, cfg, lr)
            self.loss_log.append(loss.item())

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        wrapped = {k: Tensor(v) for k, v in self.params.items()}
        return self._forward(np.asarray(features, dtype=np.float32), wrapped).data


class LinearHead:
    """Linear classification head over frozen embeddings (softmax posterior)."""

    def __init__(self, input_dim: int, n_classes: int, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(seed))
        a = np.sqrt(6.0 / (input_dim + n_classes))
        self.params = {
            "w": rng.uniform(-a, a, size=(input_dim, n_classes)).astype(np.float32),
            "b": np.zeros(n_classes, dtype=np.float32),
        }
        self.n_classes = n_classes

    def train(self, features: np.ndarray, labels: np.ndarray, epochs: int = 300, lr: float = 1e-2) -> None:
        x = np.asarray(features, dtype=np.float32)
        y = _onehot(np.asarray(labels, dtype=np.int64), self.n_classes)
        cfg = TrainConfig(epochs=max(epochs, 1), batch_size=len(x), learning_rate=lr, seed=0)
        state = AdamState.for_params(self.params)
        mask = np.ones(len(x), dtype=np.float32)
        for _ in range(epochs):
            wrapped = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
            probs = softmax(add(matmul(Tensor(x), wrapped["w"]), wrapped["b"]))
            loss = masked_mse(probs, Tensor(y), mask)
            backward(loss)
            adam_step(self.params, {k: t.grad for k, t in wrapped.items()}, state, cfg, lr)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        logits = np.asarray(features, dtype=np.float32) @ self.params["w"] + self.params["b"]
        z = logits.astype(np.float64)
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


# -- encoder probes ---------------------------------------------------------------


def embed_images(encoder: Encoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Mean-pooled final embedding of each image, full patch grid visible."""
    cfg = encoder.cfg
    p = wrap_params(encoder.params, trainable=False)
    out = []
    for start in range(0, len(images), chunk):
        patches = patchify_batch(images[start : start + chunk], cfg.patch_side)
        emb = encoder_forward(cfg, p, patches, None)
        out.append(emb.data.mean(axis=1))
    return np.concatenate(out, axis=0)


def layer_features(encoder: Encoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Output embedding plus per-block activations, each mean-pooled.

    Feature length is embed_dim * (encoder_layers + 1).
    """
    cfg = encoder.cfg
    p = wrap_params(encoder.params, trainable=False)
    out = []
    for start in range(0, len(images), chunk):
        patches = patchify_batch(images[start : start + chunk], cfg.patch_side)
        final, layers = encoder_forward(cfg, p, patches, None, collect_layers=True)
        pooled = [final.data.mean(axis=1)] + [b.data.mean(axis=1) for b in layers]
        out.append(np.concatenate(pooled, axis=1))
    return np.concatenate(out, axis=0)


def embedding_entropy(embedding: np.ndarray) -> float:
    """Shannon entropy (nats) of the softmax over one embedding vector."""
    z = np.asarray(embedding, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    probs = e / e.sum()
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def baseline_c_score(encoder: Encoder, image: np.ndarray) -> float:
    """Entropy of the mean-pooled embedding of one image."""
    return embedding_entropy(embed_images(encoder, image[None])[0])


def _entropies(encoder: Encoder, images: np.ndarray) -> np.ndarray:
    emb = embed_images(encoder, images)
    return np.array([embedding_entropy(e) for e in emb])


def baseline_d_score(
    encoder: Encoder,
    image: np.ndarray,
    k: int = 10,
    seed: int = 0,
    mask_ratio: float | None = None,
    sample_id: int = 0,
    draw_seeds=None,
) -> float:
    """Mean pairwise embedding distance across k random maskings of one image."""
    scores = _stability_scores(
        encoder, image[None], np.asarray([sample_id]), k, seed, mask_ratio, draw_seeds
    )
    return float(scores[0])


def _stability_scores(
    encoder: Encoder,
    images: np.ndarray,
    ids: np.ndarray,
    k: int,
    seed: int,
    mask_ratio: float | None = None,
    draw_seeds=None,
    chunk: int = 256,
) -> np.ndarray:
    if k < 2:
        raise BaselineError(f"stability scoring needs k >= 2 mask draws, got {k}")
    cfg = encoder.cfg
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    p = wrap_params(encoder.params, trainable=False)
    out = np.empty(len(images), dtype=np.float64)
    for start in range(0, len(images), chunk):
        stop = min(start + chunk, len(images))
        patches = patchify_batch(images[start:stop], cfg.patch_side)
        pooled = []
        for d in range(k):
            if draw_seeds is not None:
                seeds = [int(draw_seeds[d])] * (stop - start)
            else:
                seeds = [
                    int(np.random.SeedSequence((seed, int(sid), d)).generate_state(1, np.uint64)[0])
                    for sid in ids[start:stop]
                ]
            plans = [sample_mask(cfg.n_patches, ratio, s) for s in seeds]
            vis_idx, _, _ = mask_arrays(plans)
            emb = encoder_forward(cfg, p, patches, vis_idx)
            pooled.append(emb.data.mean(axis=1).astype(np.float64))
        stack = np.stack(pooled)  # [k, b, d]
        total = np.zeros(stop - start, dtype=np.float64)
        pairs = 0
        for i in range(k):
            for j in range(i + 1, k):
                total += np.linalg.norm(stack[i] - stack[j], axis=1)
                pairs += 1
        out[start:stop] = total / pairs
    return out


# -- the four baselines -------------------------------------------------------------


def _classifier_report(
    method: str,
    clf: BinaryAttackClassifier,
    target_features_members: np.ndarray,
    target_features_nonmembers: np.ndarray,
    eval_sets: EvalSets,
    shadow_objective: float,
    extras: dict[str, str] | None = None,
) -> AttackReport:
    """Score = predicted non-member probability, so members sit below 0.5."""
    threshold = Threshold(value=0.5, objective=shadow_objective)
    member_records = [
        ScoreRecord(int(sid), float(score), True, "target")
        for sid, score in zip(eval_sets.target_members.ids, clf.predict_proba(target_features_members)[:, 0])
    ]
    nonmember_records = [
        ScoreRecord(int(sid), float(score), False, "target")
        for sid, score in zip(
            eval_sets.target_nonmembers.ids, clf.predict_proba(target_features_nonmembers)[:, 0]
        )
    ]
    return build_report(method, threshold, member_records, nonmember_records, extras)


def _fit_attack_classifier(
    member_features: np.ndarray, nonmember_features: np.ndarray, seed: int
) -> tuple[BinaryAttackClassifier, float]:
    x = np.concatenate([member_features, nonmember_features], axis=0)
    y = np.concatenate([np.ones(len(member_features)), np.zeros(len(nonmember_features))]).astype(np.int64)
    clf = BinaryAttackClassifier(x.shape[1], seed=seed)
    clf.train(x, y)
    probs = clf.predict_proba(x)
    objective = balanced_accuracy(
        probs[: len(member_features), 0], probs[len(member_features) :, 0], 0.5
    )
    return clf, objective


def baseline_a(
    target_encoder: Encoder,
    shadow_encoder: Encoder,
    downstream_images: np.ndarray,
    downstream_labels: np.ndarray | None,
    eval_sets: EvalSets,
    seed: int = 0,
) -> AttackReport:
    """Attack posteriors of downstream classifiers built on the encoders."""
    if downstream_labels is None:
        raise BaselineError("baseline A needs labeled downstream data")
    n_classes = int(downstream_labels.max()) + 1

    target_emb = embed_images(target_encoder, downstream_images)
    shadow_emb = embed_images(shadow_encoder, downstream_images)
    target_head = LinearHead(target_emb.shape[1], n_classes, seed=seed)
    target_head.train(target_emb, downstream_labels)
    shadow_head = LinearHead(shadow_emb.shape[1], n_classes, seed=seed + 1)
    shadow_head.train(shadow_emb, downstream_labels)

    def posteriors(head: LinearHead, encoder: Encoder, images: np.ndarray) -> np.ndarray:
        probs = head.predict_proba(embed_images(encoder, images))
        return np.sort(probs, axis=1)[:, ::-1]  # sort descending: class order must not leak

    shadow_m = posteriors(shadow_head, shadow_encoder, eval_sets.shadow_members.images)
    shadow_n = posteriors(shadow_head, shadow_encoder, eval_sets.shadow_nonmembers.images)
    clf, objective = _fit_attack_classifier(shadow_m, shadow_n, seed)

    target_m = posteriors(target_head, target_encoder, eval_sets.target_members.images)
    target_n = posteriors(target_head, target_encoder, eval_sets.target_nonmembers.images)
    return _classifier_report("A", clf, target_m, target_n, eval_sets, objective)


def baseline_b(
    target_encoder: Encoder,
    shadow_encoder: Encoder,
    eval_sets: EvalSets,
    seed: int = 0,
) -> AttackReport:
    """White-box attack on output embedding plus internal activations."""
    if target_encoder.cfg.encoder_layers != shadow_encoder.cfg.encoder_layers:
        raise BaselineError(
            "shadow and target encoders expose different layer counts: "
            f"{shadow_encoder.cfg.encoder_layers} vs {target_encoder.cfg.encoder_layers}"
        )
    shadow_m = layer_features(shadow_encoder, eval_sets.shadow_members.images)
    shadow_n = layer_features(shadow_encoder, eval_sets.shadow_nonmembers.images)
    clf, objective = _fit_attack_classifier(shadow_m, shadow_n, seed)
    target_m = layer_features(target_encoder, eval_sets.target_members.images)
    target_n = layer_features(target_encoder, eval_sets.target_nonmembers.images)
    return _classifier_report("B", clf, target_m, target_n, eval_sets, objective)


def baseline_c(
    target_encoder: Encoder,
    shadow_encoder: Encoder,
    eval_sets: EvalSets,
) -> AttackReport:
    """Embedding-entropy threshold attack."""
    threshold = search_threshold(
        _entropies(shadow_encoder, eval_sets.shadow_members.images),
        _entropies(shadow_encoder, eval_sets.shadow_nonmembers.images),
    )
    member_records = [
        ScoreRecord(int(sid), float(s), True, "target")
        for sid, s in zip(
            eval_sets.target_members.ids, _entropies(target_encoder, eval_sets.target_members.images)
        )
    ]
    nonmember_records = [
        ScoreRecord(int(sid), float(s), False, "target")
        for sid, s in zip(
            eval_sets.target_nonmembers.ids,
            _entropies(target_encoder, eval_sets.target_nonmembers.images),
        )
    ]
    return build_report("C", threshold, member_records, nonmember_records)


def baseline_d(
    target_encoder: Encoder,
    shadow_encoder: Encoder,
    eval_sets: EvalSets,
    k: int = 10,
    seed: int = 0,
) -> AttackReport:
    """Embedding-stability threshold attack (k masked forward passes)."""
    threshold = search_threshold(
        _stability_scores(
            shadow_encoder,
            eval_sets.shadow_members.images,
            eval_sets.shadow_members.ids,
            k,
            seed,
        ),
        _stability_scores(
            shadow_encoder,
            eval_sets.shadow_nonmembers.images,
            eval_sets.shadow_nonmembers.ids,
            k,
            seed,
        ),
    )
    member_scores = _stability_scores(
        target_encoder, eval_sets.target_members.images, eval_sets.target_members.ids, k, seed
    )
    nonmember_scores = _stability_scores(
        target_encoder,
        eval_sets.target_nonmembers.images,
        eval_sets.target_nonmembers.ids,
        k,
        seed,
    )
    member_records = [
        ScoreRecord(int(sid), float(s), True, "target")
        for sid, s in zip(eval_sets.target_members.ids, member_scores)
    ]
    nonmember_records = [
        ScoreRecord(int(sid), float(s), False, "target")
        for sid, s in zip(eval_sets.target_nonmembers.ids, nonmember_scores)
    ]
    return build_report("D", threshold, member_records, nonmember_records, {"k": str(k)})


BASELINES = {
    "A": baseline_a,
    "B": baseline_b,
    "C": baseline_c,
    "D": baseline_d,
}
