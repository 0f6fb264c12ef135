"""Grad-CAM over the last convolutional block of a :class:`~kdistill.models.TapNet`."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

__all__ = ["ActivationMap", "grad_cam", "save_cam"]


@dataclass
class ActivationMap:
    heat: np.ndarray  # (H, W) in [0, 1]
    class_index: int
    source_layer: str = "body"
    degenerate: bool = False


def grad_cam(model, image: torch.Tensor, class_index: int) -> ActivationMap:
    """Class activation map for ``class_index`` at input resolution.

    Channel weights are the spatial means of d logit / d feature map; the
    weighted sum of maps is rectified, bilinearly upsampled to the input
    size and divided by its maximum. An all-zero raw map yields an all-zero
    heat map with ``degenerate=True``.
    """
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[0] != 1:
        raise ValueError(f"expected a single (C, H, W) image, got {tuple(image.shape)}")
    num_classes = model.spec.class_count
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class_index {class_index} outside [0, {num_classes})")

    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            image = image.detach().to(next(model.parameters()).dtype)
            taps = model.taps(image)
            (grads,) = torch.autograd.grad(taps.logits[0, class_index], taps.features)
    finally:
        model.train(was_training)

    feats = taps.features.detach()
    alpha = grads.mean(dim=(2, 3), keepdim=True)
    raw = F.relu((alpha * feats).sum(dim=1, keepdim=True))
    up = F.interpolate(raw, size=tuple(image.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
    peak = up.max()
    if peak <= 0:
        return ActivationMap(np.zeros(tuple(up.shape)), class_index, degenerate=True)
    heat = (up / peak).clamp(0.0, 1.0)
    return ActivationMap(heat.double().numpy(), class_index)


def save_cam(cam: ActivationMap, image: torch.Tensor, out_dir, stem: str = "cam", alpha: float = 0.45):
    """Write ``<stem>_heat.png`` (grayscale) and ``<stem>_overlay.png``."""
    import matplotlib

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heat8 = (cam.heat * 255).round().astype(np.uint8)
    heat_path = out_dir / f"{stem}_heat.png"
    Image.fromarray(heat8, mode="L").save(heat_path)

    rgb = image.detach().squeeze(0).permute(1, 2, 0).clamp(0, 1).double().numpy()
    colored = matplotlib.colormaps["jet"](cam.heat)[..., :3]
    overlay = (1 - alpha) * rgb + alpha * colored
    overlay_path = out_dir / f"{stem}_overlay.png"
    Image.fromarray((overlay * 255).round().astype(np.uint8)).save(overlay_path)
    return heat_path, overlay_path
