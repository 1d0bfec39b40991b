"""Reconstruction-distance membership inference.

The attack scores an image by masking it, reconstructing it through an
encoder/decoder pair, and measuring the mean squared error on the hidden
patches (optionally over the full image). Scores of known members and
non-members of a shadow model calibrate a threshold; images whose score
against the simulated target pair falls strictly below it are called
members.

Scoring a frozen pair is embarrassingly parallel over samples; threshold
search and report assembly are single-threaded.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Decoder,
    Encoder,
    ModelPair,
    decoder_forward,
    encoder_forward,
    mask_arrays,
    patchify_batch,
    sample_mask,
    wrap_params,
)
from .trainer import TrainConfig, TrainLog, finetune_decoder

MEMBER_IFF_BELOW = "member-iff-score-below"
SCOPES = ("masked-only", "full-image")


class AttackError(Exception):
    """Invalid attack inputs."""


@dataclass(frozen=True)
class ScoreRecord:
    """One sample's membership score with its ground truth."""

    sample_id: int
    score: float
    is_member: bool
    split: str  # "shadow" or "target"

    def __post_init__(self):
        if not (np.isfinite(self.score) and self.score >= 0.0):
            raise AttackError(f"score must be finite and >= 0, got {self.score}")


@dataclass(frozen=True)
class Threshold:
    """A score cut point and the balanced accuracy it achieved on shadow data."""

    value: float
    objective: float
    direction: str = MEMBER_IFF_BELOW


@dataclass(frozen=True)
class ScoreStats:
    mean: float
    std: float
    q25: float
    q50: float
    q75: float

    @classmethod
    def of(cls, scores) -> "ScoreStats":
        arr = np.asarray(scores, dtype=np.float64)
        q25, q50, q75 = np.percentile(arr, [25, 50, 75])
        return cls(float(arr.mean()), float(arr.std()), float(q25), float(q50), float(q75))


@dataclass
class AttackReport:
    """Threshold, verdicts and score distributions for one experiment."""

    method: str
    threshold: Threshold
    asr: float
    member_stats: ScoreStats
    nonmember_stats: ScoreStats
    verdicts: list[tuple[int, str, float]]
    extras: dict[str, str] = field(default_factory=dict)


# -- scoring --------------------------------------------------------------------


def _draw_seed(seed: int, sample_id: int, draw: int) -> int:
    return int(np.random.SeedSequence((seed, sample_id, draw)).generate_state(1, np.uint64)[0])


def score_images(
    pair: ModelPair,
    images: np.ndarray,
    sample_ids,
    n_draws: int,
    seed: int,
    scope: str = "masked-only",
    chunk: int = 128,
) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruction distances for a batch of images.

    Returns (masked_scores, full_scores): the per-image mean over `n_draws`
    mask draws of the masked-patch MSE and of the full-image MSE. Both come
    from the same forward passes, so reporting the off-scope variant is
    free. `scope` only selects which one callers should treat as "the"
    score; both arrays are always filled.
    """
    if scope not in SCOPES:
        raise AttackError(f"unknown scope {scope!r}; choose from {SCOPES}")
    if n_draws < 1:
        raise AttackError(f"n_draws must be >= 1, got {n_draws}")
    cfg = pair.encoder.cfg
    ids = np.asarray(sample_ids, dtype=np.int64)
    if len(ids) != len(images):
        raise AttackError(f"{len(ids)} sample ids for {len(images)} images")

    enc_t = wrap_params(pair.encoder.params, trainable=False)
    dec_t = wrap_params(pair.decoder.params, trainable=False)
    masked_sum = np.zeros(len(images), dtype=np.float64)
    full_sum = np.zeros(len(images), dtype=np.float64)
    for start in range(0, len(images), chunk):
        stop = min(start + chunk, len(images))
        patches = patchify_batch(images[start:stop], cfg.patch_side)
        for d in range(n_draws):
            plans = [
                sample_mask(cfg.n_patches, pair.mask_ratio, _draw_seed(seed, int(sid), d))
                for sid in ids[start:stop]
            ]
            vis_idx, restore_idx, mask = mask_arrays(plans)
            emb = encoder_forward(cfg, enc_t, patches, vis_idx)
            pred = decoder_forward(pair.decoder.cfg, dec_t, emb, restore_idx).data
            sq = (pred.astype(np.float64) - patches.astype(np.float64)) ** 2
            full_sum[start:stop] += sq.mean(axis=(1, 2))
            sel = (sq * mask[:, :, None]).sum(axis=(1, 2))
            masked_sum[start:stop] += sel / (mask.sum(axis=1) * cfg.patch_dim)
    return masked_sum / n_draws, full_sum / n_draws


def membership_score(
    encoder: Encoder,
    decoder: Decoder,
    image: np.ndarray,
    n_draws: int,
    seed: int,
    scope: str = "masked-only",
    mask_ratio: float | None = None,
    sample_id: int = 0,
) -> float:
    """Mean reconstruction distance of one image over `n_draws` mask draws."""
    ratio = encoder.cfg.mask_ratio if mask_ratio is None else mask_ratio
    pair = ModelPair(encoder=encoder, decoder=decoder, mask_ratio=ratio)
    masked, full = score_images(pair, image[None], [sample_id], n_draws, seed, scope)
    return float(masked[0] if scope == "masked-only" else full[0])


# -- threshold search -------------------------------------------------------------


def candidate_cuts(member_scores, nonmember_scores) -> np.ndarray:
    """All cut points considered: +-inf plus midpoints of adjacent distinct values."""
    values = np.unique(np.concatenate([np.asarray(member_scores, dtype=np.float64), np.asarray(nonmember_scores, dtype=np.float64)]))
    mids = (values[:-1] + values[1:]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def balanced_accuracy(member_scores, nonmember_scores, cut: float) -> float:
    """Balanced accuracy of "member iff score < cut"."""
    mem = np.asarray(member_scores, dtype=np.float64)
    non = np.asarray(nonmember_scores, dtype=np.float64)
    tpr = float((mem < cut).sum()) / len(mem)
    tnr = float((non >= cut).sum()) / len(non)
    return (tpr + tnr) / 2.0


def search_threshold(member_scores, nonmember_scores) -> Threshold:
    """The cut maximizing balanced accuracy; ties go to the smaller cut.

    Members sit below the threshold (lower reconstruction error), so the
    objective is (P[member < t] + P[nonmember >= t]) / 2 scanned over the
    midpoints of adjacent score values plus the two infinities.
    """
    mem = np.sort(np.asarray(member_scores, dtype=np.float64))
    non = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
    if len(mem) == 0 or len(non) == 0:
        raise AttackError("search_threshold needs nonempty member and nonmember scores")
    cuts = candidate_cuts(mem, non)
    tpr = np.searchsorted(mem, cuts, side="left") / len(mem)
    tnr = 1.0 - np.searchsorted(non, cuts, side="left") / len(non)
    ba = (tpr + tnr) / 2.0
    best = int(np.argmax(ba))  # first max = smallest cut
    return Threshold(value=float(cuts[best]), objective=float(ba[best]))


def infer(score: float, threshold: Threshold) -> str:
    """"member" iff the score lies strictly below the threshold."""
    return "member" if score < threshold.value else "nonmember"


def evaluate_asr(verdicts, ground_truth) -> float:
    """Fraction of correct verdicts over a balanced evaluation set."""
    verdicts = list(verdicts)
    truth = list(ground_truth)
    if len(verdicts) != len(truth):
        raise AttackError(f"{len(verdicts)} verdicts vs {len(truth)} ground-truth labels")
    if not verdicts:
        raise AttackError("empty evaluation set")
    n_members = sum(bool(t) for t in truth)
    n_non = len(truth) - n_members
    if abs(n_members - n_non) > 0.01 * len(truth):
        warnings.warn(
            f"evaluation set is imbalanced: {n_members} members vs {n_non} non-members",
            stacklevel=2,
        )
    correct = sum(
        (v == "member") == bool(t) for v, t in zip(verdicts, truth)
    )
    return correct / len(verdicts)


def simulate_target(
    target_encoder: Encoder,
    shadow_decoder: Decoder,
    shadow_train_images: np.ndarray,
    config: TrainConfig,
) -> tuple[ModelPair, TrainLog]:
    """Attach the shadow decoder to the frozen target encoder and adapt it.

    The returned pair reconstructs with the adversary's mask ratio (the
    shadow decoder's configuration), since the target's true ratio is only
    assumed, not observed.
    """
    ratio = shadow_decoder.cfg.mask_ratio
    decoder, log = finetune_decoder(
        target_encoder, shadow_decoder, shadow_train_images, config, mask_ratio=ratio
    )
    pair = ModelPair(encoder=target_encoder, decoder=decoder, mask_ratio=ratio)
    return pair, log


# -- report assembly and serialization --------------------------------------------


def build_report(
    method: str,
    threshold: Threshold,
    member_records: list[ScoreRecord],
    nonmember_records: list[ScoreRecord],
    extras: dict[str, str] | None = None,
) -> AttackReport:
    """Apply the threshold to target scores and assemble the report."""
    records = member_records + nonmember_records
    verdicts = [(r.sample_id, infer(r.score, threshold), r.score) for r in records]
    asr = evaluate_asr([v for _, v, _ in verdicts], [r.is_member for r in records])
    return AttackReport(
        method=method,
        threshold=threshold,
        asr=asr,
        member_stats=ScoreStats.of([r.score for r in member_records]),
        nonmember_stats=ScoreStats.of([r.score for r in nonmember_records]),
        verdicts=verdicts,
        extras=dict(extras or {}),
    )


def scores_csv(records: list[ScoreRecord]) -> str:
    lines = ["sample_id,split,is_member,score"]
    for r in records:
        lines.append(f"{r.sample_id},{r.split},{int(r.is_member)},{r.score!r}")
    return "\n".join(lines) + "\n"


def parse_scores_csv(text: str) -> list[ScoreRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "sample_id,split,is_member,score":
        raise AttackError("not a scores CSV")
    out = []
    for ln in lines[1:]:
        sid, split, is_member, score = ln.split(",")
        out.append(
            ScoreRecord(
                sample_id=int(sid), score=float(score), is_member=bool(int(is_member)), split=split
            )
        )
    return out


_STATS_KEYS = ("mean", "std", "q25", "q50", "q75")


def report_text(report: AttackReport) -> str:
    """Structured text: key=value lines plus a verdicts CSV block.

    Byte-for-byte deterministic for identical report contents; floats are
    rendered with repr (shortest round-trip form).
    """
    buf = io.StringIO()
    buf.write(f"method={report.method}\n")
    buf.write(f"asr={report.asr!r}\n")
    buf.write(f"threshold.value={report.threshold.value!r}\n")
    buf.write(f"threshold.objective={report.threshold.objective!r}\n")
    buf.write(f"threshold.direction={report.threshold.direction}\n")
    for label, stats in (("member", report.member_stats), ("nonmember", report.nonmember_stats)):
        for key in _STATS_KEYS:
            buf.write(f"{label}.{key}={getattr(stats, key)!r}\n")
    for key in sorted(report.extras):
        buf.write(f"extra.{key}={report.extras[key]}\n")
    buf.write("[verdicts]\n")
    buf.write("sample_id,verdict,score\n")
    for sid, verdict, score in report.verdicts:
        buf.write(f"{sid},{verdict},{score!r}\n")
    return buf.getvalue()


def parse_report_text(text: str) -> AttackReport:
    head, _, tail = text.partition("[verdicts]\n")
    fields: dict[str, str] = {}
    for line in head.splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            fields[key] = value
    body = tail.splitlines()
    if not body or body[0] != "sample_id,verdict,score":
        raise AttackError("report lacks a verdicts block")
    verdicts = []
    for line in body[1:]:
        if not line.strip():
            continue
        sid, verdict, score = line.split(",")
        verdicts.append((int(sid), verdict, float(score)))
    extras = {k[6:]: v for k, v in fields.items() if k.startswith("extra.")}

    def stats(prefix: str) -> ScoreStats:
        return ScoreStats(**{k: float(fields[f"{prefix}.{k}"]) for k in _STATS_KEYS})

    return AttackReport(
        method=fields["method"],
        threshold=Threshold(
            value=float(fields["threshold.value"]),
            objective=float(fields["threshold.objective"]),
            direction=fields["threshold.direction"],
        ),
        asr=float(fields["asr"]),
        member_stats=stats("member"),
        nonmember_stats=stats("nonmember"),
        verdicts=verdicts,
        extras=extras,
    )
