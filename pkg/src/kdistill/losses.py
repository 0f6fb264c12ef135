"""Distillation objectives.

Every loss returns a scalar tensor and treats teacher-side inputs as
constants (they are detached on entry). Batch sums are reduced by the mean
so that loss weights do not depend on the batch size.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from .relations import angle_potential, channel_relation_matrix, distance_potential

__all__ = [
    "LossWeights",
    "Taps",
    "kd_loss",
    "weighted_cross_entropy",
    "blkd_loss",
    "drkd_loss",
    "crkd_loss",
    "sskd_loss",
    "contrastive_loss",
    "dkd_loss",
    "ssdkd_loss",
]


@dataclass
class LossWeights:
    """Weights and temperatures of the composite objective.

    The outer weights default to the self-supervised configuration
    (blkd, drkd, crkd, sskd) = (1, 1, 1000, 1).
    """

    lambda_kd: float = 0.9
    lambda_d: float = 1.0
    lambda_a: float = 2.0
    huber_delta: float = 1.0
    lambda_blkd: float = 1.0
    lambda_drkd: float = 1.0
    lambda_crkd: float = 1000.0
    lambda_sskd: float = 1.0
    temperature: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or value != value or abs(value) == float("inf"):
                raise ValueError(f"{f.name} must be a finite number, got {value!r}")
            if value < 0:
                raise ValueError(f"{f.name} must be nonnegative, got {value}")
        if not 0.0 <= self.lambda_kd <= 1.0:
            raise ValueError(f"lambda_kd must lie in [0, 1], got {self.lambda_kd}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")


class Taps(NamedTuple):
    """Minimal tap triple accepted by the composite losses."""

    features: torch.Tensor
    embedding: torch.Tensor
    logits: torch.Tensor


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _zero_like_graph(t: torch.Tensor) -> torch.Tensor:
    # keeps the result attached to the student graph
    return (t * 0).sum()


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float = 4.0) -> torch.Tensor:
    """KL(teacher || student) of temperature-softened predictions, times T^2."""
    _same_shape(teacher_logits, student_logits, "logits")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    log_pt = F.log_softmax(teacher_logits.detach() / temperature, dim=1)
    log_ps = F.log_softmax(student_logits / temperature, dim=1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1)
    return kl.mean() * temperature ** 2


def weighted_cross_entropy(student_logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-w[y] * log softmax(logits)[y]``."""
    if student_logits.dim() != 2:
        raise ValueError(f"logits must be (B, C), got {tuple(student_logits.shape)}")
    n, c = student_logits.shape
    labels = torch.as_tensor(labels, device=student_logits.device).long()
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {tuple(labels.shape)}")
    if ((labels < 0) | (labels >= c)).any():
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    weights = torch.as_tensor(weights, dtype=student_logits.dtype, device=student_logits.device)
    if weights.shape != (c,):
        raise ValueError(f"weights must have shape ({c},), got {tuple(weights.shape)}")
    if not (weights > 0).all():
        raise ValueError("class weights must be positive")
    log_p = F.log_softmax(student_logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return -(weights[labels] * log_p).mean()


def blkd_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    labels: torch.Tensor,
    weights: torch.Tensor,
    lw: LossWeights,
) -> torch.Tensor:
    """(1 - lambda_kd) * WCE + lambda_kd * KD."""
    wce = weighted_cross_entropy(student_logits, labels, weights)
    kd = kd_loss(teacher_logits, student_logits, lw.temperature)
    return (1.0 - lw.lambda_kd) * wce + lw.lambda_kd * kd


def drkd_loss(teacher_embeddings: torch.Tensor, student_embeddings: torch.Tensor, lw: LossWeights) -> torch.Tensor:
    """Huber mismatch of distance and angle potentials between the two batches.

    The distance term averages over ordered pairs i != j; the angle term over
    ordered triples of distinct, non-coincident points valid in both models.
    With only two samples the angle term is skipped.
    """
    if teacher_embeddings.shape[0] != student_embeddings.shape[0]:
        raise ValueError(
            f"batch size mismatch: {teacher_embeddings.shape[0]} vs {student_embeddings.shape[0]}"
        )
    n = student_embeddings.shape[0]
    if n < 2:
        raise ValueError(f"relational loss needs at least 2 samples, got {n}")
    te = teacher_embeddings.detach()

    off_diag = ~torch.eye(n, dtype=torch.bool, device=student_embeddings.device)
    psi_t = distance_potential(te)
    psi_s = distance_potential(student_embeddings)
    dist_term = F.huber_loss(psi_s[off_diag], psi_t[off_diag], delta=lw.huber_delta)

    if n < 3:
        warnings.warn("batch of 2: angle-wise relation term disabled", RuntimeWarning)
        return lw.lambda_d * dist_term

    ang_t, valid_t = angle_potential(te, return_mask=True)
    ang_s, valid_s = angle_potential(student_embeddings, return_mask=True)
    valid = valid_t & valid_s
    if valid.any():
        angle_term = F.huber_loss(ang_s[valid], ang_t[valid], delta=lw.huber_delta)
    else:
        angle_term = _zero_like_graph(student_embeddings)
    return lw.lambda_d * dist_term + lw.lambda_a * angle_term


def crkd_loss(teacher_features: torch.Tensor, adapted_student_features: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``||R_t - R_s||_F / (K * H_f * W_f)``."""
    _same_shape(teacher_features, adapted_student_features, "feature map")
    if teacher_features.dim() != 4:
        raise ValueError(f"features must be (B, K, H, W), got {tuple(teacher_features.shape)}")
    _, k, h, w = teacher_features.shape
    gram_t = channel_relation_matrix(teacher_features.detach())
    gram_s = channel_relation_matrix(adapted_student_features)
    sq = ((gram_t - gram_s) ** 2).sum(dim=(1, 2))
    nonzero = sq > 0
    fro = torch.where(nonzero, torch.where(nonzero, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))
    return (fro / (k * h * w)).mean()


def _check_views(projections: torch.Tensor, views: int, tau: float) -> None:
    if views < 2:
        raise ValueError(f"self-supervision needs at least 2 views, got {views}")
    if not tau > 0:
        raise ValueError(f"similarity temperature must be positive, got {tau}")
    if projections.dim() != 2 or projections.shape[0] % views:
        raise ValueError(
            f"projections must be (B*V, P) with V={views}, got {tuple(projections.shape)}"
        )
    if not torch.isfinite(projections).all():
        raise ValueError("projections contain non-finite values")


def _offdiag_log_similarity(projections: torch.Tensor, tau: float) -> torch.Tensor:
    z = F.normalize(projections, dim=1)
    sim = z @ z.t() / tau
    n = sim.shape[0]
    keep = ~torch.eye(n, dtype=torch.bool, device=sim.device)
    return F.log_softmax(sim[keep].view(n, n - 1), dim=1)


def sskd_loss(
    teacher_projections: torch.Tensor,
    student_projections: torch.Tensor,
    views: int = 4,
    tau: float = 0.5,
) -> torch.Tensor:
    """Transfer of the teacher's view-similarity predictions to the student.

    Rows are instance-major (row ``b * views + v``). For each model, every
    row's cosine similarities to all other rows are turned into a
    distribution by a softmax at ``tau``; the loss is the mean over rows of
    KL(teacher row || student row).
    """
    _same_shape(teacher_projections, student_projections, "projection")
    _check_views(student_projections, views, tau)
    log_t = _offdiag_log_similarity(teacher_projections.detach(), tau)
    log_s = _offdiag_log_similarity(student_projections, tau)
    return (log_t.exp() * (log_t - log_s)).sum(dim=1).mean()


def contrastive_loss(projections: torch.Tensor, views: int = 4, tau: float = 0.5) -> torch.Tensor:
    """Multi-positive NT-Xent over instance-major views, used for teacher pretraining."""
    _check_views(projections, views, tau)
    n = projections.shape[0]
    log_p = _offdiag_log_similarity(projections, tau)
    owner = torch.arange(n, device=projections.device) // views
    same = owner[:, None] == owner[None, :]
    keep = ~torch.eye(n, dtype=torch.bool, device=projections.device)
    positives = same[keep].view(n, n - 1)
    return -(log_p * positives).sum(dim=1).div(views - 1).mean()


def dkd_loss(
    teacher: Taps,
    student: Taps,
    labels: torch.Tensor,
    weights: torch.Tensor,
    lw: LossWeights,
    adapted_features: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """lambda_blkd * BLKD + lambda_drkd * DRKD + lambda_crkd * CRKD.

    ``adapted_features`` are the student's maps already projected to the
    teacher's channel space; by default ``student.features`` is used as is.
    Terms with a zero weight are not evaluated.
    """
    if adapted_features is None:
        adapted_features = student.features
    total = _zero_like_graph(student.logits)
    if lw.lambda_blkd:
        total = total + lw.lambda_blkd * blkd_loss(teacher.logits, student.logits, labels, weights, lw)
    if lw.lambda_drkd:
        total = total + lw.lambda_drkd * drkd_loss(teacher.embedding, student.embedding, lw)
    if lw.lambda_crkd:
        total = total + lw.lambda_crkd * crkd_loss(teacher.features, adapted_features)
    return total


def ssdkd_loss(
    teacher: Taps,
    student: Taps,
    labels: torch.Tensor,
    weights: torch.Tensor,
    lw: LossWeights,
    teacher_projections: torch.Tensor,
    student_projections: torch.Tensor,
    views: int = 4,
    tau: float = 0.5,
    adapted_features: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """D-KD objective plus ``lambda_sskd`` times the self-supervised transfer term."""
    total = dkd_loss(teacher, student, labels, weights, lw, adapted_features)
    if lw.lambda_sskd:
        total = total + lw.lambda_sskd * sskd_loss(teacher_projections, student_projections, views, tau)
    return total
