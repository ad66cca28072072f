"""Per-sub-network saliency heat maps.

Saliency is the channel-wise L2 norm of a sub-network's attended bottleneck,
bilinearly upsampled to the input size.  Rendering maps high values to red
and low values to blue, blended over the input image.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .model import MsatlModel, extract_features


@torch.no_grad()
def saliency(model: MsatlModel, i: int, x: torch.Tensor) -> torch.Tensor:
    """B x H x W saliency of sub-network ``i`` for images ``x``."""
    model.eval()
    bottleneck, _ = extract_features(model, i, x)
    sal = bottleneck.norm(dim=1, keepdim=True)
    sal = F.interpolate(sal, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return sal[:, 0]


def render_heatmap(image: np.ndarray, sal: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    lo, hi = float(sal.min()), float(sal.max())
    norm = (sal - lo) / (hi - lo) if hi > lo else np.zeros_like(sal)
    colored = colormaps["jet"](norm)[..., :3] * 255.0
    out = (1 - alpha) * image.astype(np.float64) + alpha * colored
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def export_heatmaps(model: MsatlModel, image: np.ndarray, out_dir, stem: str = "heatmap"
                    ) -> List[Path]:
    """Write one overlay PNG per sub-network; returns the written paths."""
    size = model.cfg.image_size
    if image.shape != (size, size, 3):
        raise ValueError(f"expected a {size}x{size} RGB image, got shape {image.shape}")
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)[None].to(dtype)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(1, model.N + 1):
        sal = saliency(model, i, x)[0].numpy()
        path = out_dir / f"{stem}_sub{i}.png"
        Image.fromarray(render_heatmap(image, sal)).save(path, format="PNG")
        paths.append(path)
    return paths


def region_mean(sal: np.ndarray, region: np.ndarray) -> float:
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("empty region")
    return float(sal[region].mean())
