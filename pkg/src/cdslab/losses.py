"""Supervised, deep-supervision, contrastive and distillation losses.

Every composite loss returns a :class:`LossBundle` whose ``total`` is the
weighted sum of its named scalar components, so curves can report each term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .network import TapOutputs
from .tensor import Tensor

UNIT_NORM_TOL = 1e-4


@dataclass
class LossWeights:
    alpha: float = 0.3
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    tau: float = 0.5
    T: float = 4.0

    def validate(self) -> None:
        for name in ("alpha", "beta", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if self.tau <= 0 or self.T <= 0:
            raise ConfigError("tau and T must be positive")


@dataclass
class LossBundle:
    total: Tensor
    components: dict[str, Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: Tensor, weight: float) -> None:
        self.components[name] = value
        self.weights[name] = float(weight)

    def values(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in self.components.items()}

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * float(v.data) for k, v in self.components.items())


def _bundle(parts: list[tuple[str, Tensor, float]]) -> LossBundle:
    total = None
    b = LossBundle(total=None)
    for name, value, weight in parts:
        b.add(name, value, weight)
        if weight == 0:
            continue
        term = value if weight == 1 else T.scale(value, weight)
        total = term if total is None else T.add(total, term)
    if total is None:
        like = parts[0][1] if parts else None
        total = T.Tensor(np.zeros((), dtype=like.dtype if like is not None else np.float32))
    b.total = total
    return b


# ---------------------------------------------------------------------------
# primitive losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = T.log_softmax(logits)
    picked = T.take(logp, (np.arange(labels.size), labels))
    return T.scale(T.mean(picked), -1.0)


def _check_unit_rows(z: Tensor) -> None:
    if z.ndim != 2:
        raise DimensionError(f"embeddings must be [rows x D], got {z.shape}")
    norms = np.sqrt((z.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1) > UNIT_NORM_TOL):
        raise ValueError("contrastive embeddings must be row-normalized")


def _similarity_logprob(z: Tensor, tau: float) -> Tensor:
    sim = T.scale(T.matmul(z, T.transpose(z)), 1.0 / tau)
    return T.log_softmax(sim, mask=np.eye(z.shape[0], dtype=bool))


def nt_xent(z: Tensor, tau: float) -> Tensor:
    """Normalized temperature-scaled cross entropy over a two-view batch.

    Rows ``i`` and ``i + N`` are the two views of image ``i``. The anchors are
    the first N rows and the per-anchor terms are summed:
    ``-sum_i log(exp(z_i.z_{i+N}/tau) / sum_{k != i} exp(z_i.z_k/tau))``.
    """
    if z.ndim != 2 or z.shape[0] % 2:
        raise DimensionError(f"nt_xent needs an even number of rows, got {z.shape}")
    _check_unit_rows(z)
    n = z.shape[0] // 2
    logp = _similarity_logprob(z, tau)
    pos = T.take(logp, (np.arange(n), np.arange(n) + n))
    return T.scale(T.sum_(pos), -1.0)


def supcon_weights(labels, n_anchors: int) -> np.ndarray:
    """Per-(anchor, candidate) weights 1/|P(i)| over same-label positives."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    same[n_anchors:] = False
    counts = same.sum(axis=1, keepdims=True)
    return np.where(counts > 0, same / np.maximum(counts, 1), 0.0)


def supcon(z: Tensor, labels, tau: float) -> Tensor:
    """Supervised contrastive loss, log outside the mean over positives.

    Anchors are the first half of the rows, as in :func:`nt_xent`; positives
    are every other row sharing the anchor's label. Anchors without a positive
    contribute nothing. With one label per image (shared by its two views)
    this reduces exactly to :func:`nt_xent`.
    """
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"supcon: embeddings {z.shape} vs labels {labels.shape}")
    if z.shape[0] % 2:
        raise DimensionError(f"supcon needs an even number of rows, got {z.shape}")
    _check_unit_rows(z)
    w = supcon_weights(labels, z.shape[0] // 2)
    logp = _similarity_logprob(z, tau)
    return T.scale(T.sum_(T.mul(logp, T.Tensor(w.astype(z.dtype)))), -1.0)


def kl_soft(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """Batch mean of KL(softmax(teacher/T) || softmax(student/T)); teacher detached."""
    if student_logits.shape != teacher_logits.shape or student_logits.ndim != 2:
        raise DimensionError(f"kl_soft shape mismatch: {student_logits.shape} vs {teacher_logits.shape}")
    t = teacher_logits.data.astype(np.float64) / temperature
    t = t - t.max(axis=1, keepdims=True)
    log_pt = t - np.log(np.exp(t).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    entropy_term = float((pt * log_pt).sum(axis=1).mean())
    logq = T.log_softmax(T.scale(student_logits, 1.0 / temperature))
    cross = T.scale(T.sum_(T.mul(logq, T.Tensor(pt.astype(student_logits.dtype)))),
                    -1.0 / student_logits.shape[0])
    # clamp tiny negative rounding at the optimum
    out = T.add(cross, entropy_term)
    if out.data < 0:
        out = T.add(out, -float(out.data))
    return out


def _pairwise_distance_mean(a: Tensor, b: Tensor) -> Tensor:
    return T.mean(T.row_norm(T.sub(a, b)))


def feature_distill(teacher_feats: Sequence[Tensor], student_feats: Sequence[Tensor]) -> Tensor:
    """Sum over stages of the batch-mean per-sample L2 distance."""
    if len(teacher_feats) != len(student_feats) or not teacher_feats:
        raise DimensionError(f"feature lists differ in length: {len(teacher_feats)} vs {len(student_feats)}")
    total = None
    for ft, fs in zip(teacher_feats, student_feats):
        if ft.shape != fs.shape:
            raise DimensionError(f"feature shapes differ: {ft.shape} vs {fs.shape}")
        term = _pairwise_distance_mean(ft.detach(), fs)
        total = term if total is None else T.add(total, term)
    return total


def embedding_distill(teacher_embeds: Sequence[Tensor], student_embeds: Sequence[Tensor]) -> Tensor:
    """Sum over heads of the batch-mean L2 distance between normalized embeddings."""
    if len(teacher_embeds) != len(student_embeds) or not teacher_embeds:
        raise DimensionError(f"embedding lists differ in length: {len(teacher_embeds)} vs {len(student_embeds)}")
    total = None
    for et, es in zip(teacher_embeds, student_embeds):
        if et.shape != es.shape or et.ndim != 2:
            raise DimensionError(f"embedding shapes differ: {et.shape} vs {es.shape}")
        term = _pairwise_distance_mean(et.detach(), es)
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------


def _first_view(t: Tensor, n: int) -> Tensor:
    return t if t.shape[0] == n else T.take(t, slice(0, n))


def contrastive(z: Tensor, labels, w: LossWeights, kind: str) -> Tensor:
    if kind == "simclr":
        return nt_xent(z, w.tau)
    if kind == "supcon":
        labels = np.asarray(labels)
        return supcon(z, np.concatenate([labels, labels]), w.tau)
    raise ConfigError(f"unknown contrast kind {kind!r}")


def deep_supervision_loss(taps: TapOutputs, labels, w: LossWeights) -> LossBundle:
    """CE on the final classifier plus alpha times CE on every auxiliary classifier."""
    labels = np.asarray(labels)
    n = labels.size
    if w.alpha > 0 and not taps.aux_logits and len(taps.stage_features) > 1:
        raise ConfigError("deep supervision with alpha > 0 needs auxiliary classifiers")
    parts = [("ce_final", cross_entropy(_first_view(taps.final_logits, n), labels), 1.0)]
    for i, logits in enumerate(taps.aux_logits, start=1):
        parts.append((f"ce_aux_{i}", cross_entropy(_first_view(logits, n), labels), w.alpha))
    return _bundle(parts)


def dks_loss(taps: TapOutputs, labels, w: LossWeights) -> LossBundle:
    """Deep supervision plus beta times KL from the final classifier to each auxiliary one."""
    labels = np.asarray(labels)
    n = labels.size
    base = deep_supervision_loss(taps, labels, w)
    parts = [(k, v, base.weights[k]) for k, v in base.components.items()]
    teacher = _first_view(taps.final_logits, n).detach()
    for i, logits in enumerate(taps.aux_logits, start=1):
        parts.append((f"kl_{i}", kl_soft(_first_view(logits, n), teacher, w.T), w.beta))
    return _bundle(parts)


def _contra_parts(taps: TapOutputs, labels, w: LossWeights, kind: str, prefix: str, weight: float):
    return [(f"{prefix}_{i}", contrastive(z, labels, w, kind), weight)
            for i, z in enumerate(taps.aux_embeddings, start=1)]


def cds_loss(taps: TapOutputs, labels, w: LossWeights, contrast_kind: str = "simclr") -> LossBundle:
    """CE on the first view plus lambda1 times the contrastive loss of every head.

    ``taps`` comes from a stacked two-view batch of 2N rows.
    """
    labels = np.asarray(labels)
    n = labels.size
    if taps.final_logits.shape[0] != 2 * n:
        raise DimensionError(f"expected {2 * n} rows (two views), got {taps.final_logits.shape[0]}")
    if w.lambda1 > 0 and not taps.aux_embeddings:
        raise ConfigError("contrastive deep supervision with lambda1 > 0 needs projection heads")
    parts = [("ce_final", cross_entropy(_first_view(taps.final_logits, n), labels), 1.0)]
    parts += _contra_parts(taps, labels, w, contrast_kind, "contra", w.lambda1)
    return _bundle(parts)


def semi_cds_loss(labeled_taps: TapOutputs | None, labels, unlabeled_taps: TapOutputs | None,
                  w: LossWeights, contrast_kind: str = "simclr") -> LossBundle:
    """Labeled CDS loss plus an unweighted contrastive loss on the unlabeled batch.

    The unlabeled part has no labels, so it always uses the SimCLR form.
    """
    has_l = labeled_taps is not None and labeled_taps.final_logits.shape[0] > 0
    has_u = unlabeled_taps is not None and unlabeled_taps.final_logits.shape[0] > 0
    if not has_l and not has_u:
        raise ValueError("semi-supervised loss needs a labeled or an unlabeled batch")
    parts = []
    if has_l:
        b = cds_loss(labeled_taps, labels, w, contrast_kind)
        parts += [(k, v, b.weights[k]) for k, v in b.components.items()]
    if has_u:
        if not unlabeled_taps.aux_embeddings:
            raise ConfigError("unlabeled contrastive term needs projection heads")
        parts += [(f"contra_u_{i}", nt_xent(z, w.tau), 1.0)
                  for i, z in enumerate(unlabeled_taps.aux_embeddings, start=1)]
    return _bundle(parts)


def dcds_loss(student_taps: TapOutputs, teacher_taps: TapOutputs, labels, w: LossWeights,
              contrast_kind: str = "simclr", distill: str = "embedding",
              student_feats: Sequence[Tensor] | None = None) -> LossBundle:
    """CDS loss plus lambda2 times a distillation distance plus lambda3 times logit KL.

    ``distill="embedding"`` matches projection-head outputs; ``"feature"``
    matches backbone stage features instead (``student_feats`` may carry
    channel-adapted student features). Teacher tensors are always detached.
    """
    labels = np.asarray(labels)
    n = labels.size
    base = cds_loss(student_taps, labels, w, contrast_kind)
    parts = [(k, v, base.weights[k]) for k, v in base.components.items()]
    if distill == "embedding":
        if len(student_taps.aux_embeddings) != len(teacher_taps.aux_embeddings):
            raise ConfigError(f"teacher has {len(teacher_taps.aux_embeddings)} heads, "
                              f"student has {len(student_taps.aux_embeddings)}")
        parts.append(("embed_distill", embedding_distill(
            [e.detach() for e in teacher_taps.aux_embeddings], student_taps.aux_embeddings), w.lambda2))
    elif distill == "feature":
        feats = student_taps.stage_features if student_feats is None else student_feats
        if len(feats) != len(teacher_taps.stage_features):
            raise ConfigError("teacher and student have different stage counts")
        parts.append(("feat_distill", feature_distill(
            [f.detach() for f in teacher_taps.stage_features], feats), w.lambda2))
    else:
        raise ConfigError(f"unknown distillation target {distill!r}")
    parts.append(("kl_final", kl_soft(_first_view(student_taps.final_logits, n),
                                      _first_view(teacher_taps.final_logits, n).detach(), w.T), w.lambda3))
    return _bundle(parts)
