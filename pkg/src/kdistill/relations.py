"""Knowledge representations derived from raw model outputs.

Softened class probabilities, the pairwise distance and triple-wise angle
potentials over a batch of embeddings, the per-instance channel Gram matrix,
and the 1x1 channel adapter that lets a student's feature maps be compared
with the teacher's.
"""
from __future__ import annotations

from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "softened_probabilities",
    "pairwise_distances",
    "distance_potential",
    "angle_potential",
    "channel_relation_matrix",
    "ChannelAdapter",
    "adapt_channels",
]


def _require_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def _safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # double-where so the gradient at exactly zero is 0 instead of NaN
    sq = (x * x).sum(dim)
    nonzero = sq > 0
    safe = torch.where(nonzero, sq, torch.ones_like(sq))
    return torch.where(nonzero, safe.sqrt(), torch.zeros_like(sq))


def softened_probabilities(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Row-wise softmax of ``logits / temperature``.

    Args:
        logits: (B, C) scores.
        temperature: positive softening temperature; larger is softer.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must have shape (B, C>=2), got {tuple(logits.shape)}")
    _require_finite(logits, "logits")
    return F.softmax(logits / temperature, dim=1)


def pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    """(B, B) Euclidean distances, with a well-defined zero gradient on ties."""
    diff = embeddings.unsqueeze(1) - embeddings.unsqueeze(0)
    return _safe_norm(diff, dim=-1)


def distance_potential(embeddings: torch.Tensor, return_degenerate: bool = False):
    """Pairwise distances divided by their mean over all distinct pairs.

    If every embedding coincides the mean is zero; the result is then the
    all-zero matrix and ``degenerate`` is True.

    Returns:
        (B, B) tensor, or ``(tensor, degenerate)`` when ``return_degenerate``.
    """
    if embeddings.dim() != 2:
        raise ValueError(f"embeddings must be (B, D), got {tuple(embeddings.shape)}")
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError(f"distance potential needs at least 2 embeddings, got {n}")
    _require_finite(embeddings, "embeddings")

    dist = pairwise_distances(embeddings)
    off_diag = ~torch.eye(n, dtype=torch.bool, device=embeddings.device)
    mean = dist[off_diag].mean()
    degenerate = bool(mean.detach() == 0)
    if degenerate:
        psi = torch.zeros_like(dist)
    else:
        psi = dist / mean
    if return_degenerate:
        return psi, degenerate
    return psi


def angle_potential(embeddings: torch.Tensor, return_mask: bool = False):
    """Cosine of the angle at vertex ``e_j`` for every ordered triple (i, j, k).

    ``out[i, j, k] = <unit(e_i - e_j), unit(e_k - e_j)>``. Entries whose
    indices are not pairwise distinct, or whose triple contains coincident
    points, are set to 0 and marked invalid in the mask.

    Returns:
        (B, B, B) tensor, or ``(tensor, valid_mask)`` when ``return_mask``.
    """
    if embeddings.dim() != 2:
        raise ValueError(f"embeddings must be (B, D), got {tuple(embeddings.shape)}")
    n = embeddings.shape[0]
    if n < 3:
        raise ValueError(f"angle potential needs at least 3 embeddings, got {n}")
    _require_finite(embeddings, "embeddings")

    # diff[a, b] = e_a - e_b
    diff = embeddings.unsqueeze(1) - embeddings.unsqueeze(0)
    norm = _safe_norm(diff, dim=-1)
    nonzero = norm > 0
    unit = diff / torch.where(nonzero, norm, torch.ones_like(norm)).unsqueeze(-1)
    unit = unit * nonzero.unsqueeze(-1)

    cos = torch.einsum("ijd,kjd->ijk", unit, unit)

    idx = torch.arange(n, device=embeddings.device)
    distinct = (
        (idx[:, None, None] != idx[None, :, None])
        & (idx[None, :, None] != idx[None, None, :])
        & (idx[:, None, None] != idx[None, None, :])
    )
    valid = distinct & nonzero.unsqueeze(2) & nonzero.t().unsqueeze(0)
    cos = torch.where(valid, cos, torch.zeros_like(cos))
    if return_mask:
        return cos, valid
    return cos


def channel_relation_matrix(features: torch.Tensor) -> torch.Tensor:
    """Per-instance Gram matrix of vectorised channel maps.

    For features of shape (B, K, H, W) returns (B, K, K) with
    ``R[b, k, k'] = <vec(f_k), vec(f_k')>``. Single precision inputs are
    accumulated in double precision and cast back.
    """
    if features.dim() != 4:
        raise ValueError(f"features must be (B, K, H, W), got {tuple(features.shape)}")
    _require_finite(features, "features")
    flat = features.flatten(2)
    if flat.dtype in (torch.float16, torch.bfloat16, torch.float32):
        wide = flat.double()
        return torch.bmm(wide, wide.transpose(1, 2)).to(features.dtype)
    return torch.bmm(flat, flat.transpose(1, 2))


class ChannelAdapter(nn.Module):
    """Trainable 1x1 projection from the student's channel count to the teacher's.

    When the student's spatial size differs from ``target_spatial`` the maps
    are bilinearly resized first, so the teacher's H_f x W_f is used
    throughout the channel-relation loss.
    """

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=bias)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # fan-in scaling keeps the output variance close to the input's
        nn.init.normal_(self.proj.weight, std=(1.0 / self.in_channels) ** 0.5)
        if self.proj.bias is not None:
            nn.init.zeros_(self.proj.bias)

    @property
    def weight(self) -> torch.Tensor:
        """(K_teacher, K_student) view of the kernel."""
        return self.proj.weight[:, :, 0, 0]

    def forward(self, x: torch.Tensor, target_spatial: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"adapter expects {self.in_channels} input channels, got shape {tuple(x.shape)}"
            )
        if target_spatial is not None and tuple(x.shape[-2:]) != tuple(target_spatial):
            x = F.interpolate(x, size=tuple(target_spatial), mode="bilinear", align_corners=False)
        return self.proj(x)


def adapt_channels(
    student_features: torch.Tensor,
    adapter: ChannelAdapter,
    target_spatial: Optional[Tuple[int, int]] = None,
) -> torch.Tensor:
    """Resize (if needed) and project student maps into the teacher's channel space."""
    return adapter(student_features, target_spatial)
