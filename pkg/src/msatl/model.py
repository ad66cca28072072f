"""N adversarial sub-networks plus a shared fusion decoder.

Sub-network ``i`` is a U-Net encoder, a self-attention filter on the
bottleneck and a domain classifier behind a gradient reversal boundary.
By default the classifier reads the raw encoder bottleneck, so the adversarial
signal shapes the encoder only and the attention filter is trained by the
segmentation loss alone; ``classifier_input="attended"`` moves it after the
filter.  The decoder consumes the elementwise sum of every sub-network's attended
bottleneck and of their skip features at each resolution.

Sub-networks are indexed from 1 in the public functions, matching source
domain ids.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import SelfAttention
from .batching import Batch
from .data import DomainSample, derive_seed

CHECKPOINT_FORMAT = 1

TARGET_ONLY = "target_only"
PER_SAMPLE_REPLICATE = "per_sample_replicate"
SUPERVISION_MODES = (TARGET_ONLY, PER_SAMPLE_REPLICATE)

# What the domain classifier reads: the raw encoder bottleneck, or the attended one.
ENCODER_INPUT = "encoder"
ATTENDED_INPUT = "attended"
CLASSIFIER_INPUTS = (ENCODER_INPUT, ATTENDED_INPUT)

Features = Tuple[torch.Tensor, List[torch.Tensor]]


@dataclass
class ModelConfig:
    N: int = 2
    image_size: int = 64
    in_channels: int = 3
    depth: int = 4
    base_width: int = 8
    classifier_hidden: int = 64
    lam: float = 0.3
    use_attention: bool = True
    classifier_input: str = ENCODER_INPUT

    def validate(self) -> None:
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be >= 1")
        if self.image_size % (2 ** self.depth):
            raise ValueError(f"image size {self.image_size} is not divisible by "
                             f"2^{self.depth}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.classifier_input not in CLASSIFIER_INPUTS:
            raise ValueError(f"classifier_input must be one of {CLASSIFIER_INPUTS}, "
                             f"got {self.classifier_input!r}")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2 ** self.depth

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** self.depth


class GradReverse(torch.autograd.Function):
    """Identity forward; gradient multiplied by ``-lam`` backward."""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    return GradReverse.apply(x, lam)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, channels), channels)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), _norm(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    def __init__(self, in_channels: int, base: int, depth: int):
        super().__init__()
        widths = [base * 2 ** d for d in range(depth)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(DoubleConv(cin, w))
            cin = w
        self.bottom = DoubleConv(cin, base * 2 ** depth)

    def forward(self, x: torch.Tensor) -> Features:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return self.bottom(x), skips


class Decoder(nn.Module):
    def __init__(self, base: int, depth: int, n_classes: int = 2):
        super().__init__()
        self.up = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for d in reversed(range(depth)):
            w = base * 2 ** d
            self.up.append(nn.ConvTranspose2d(2 * w, w, 2, stride=2))
            self.blocks.append(DoubleConv(2 * w, w))
        self.head = nn.Conv2d(base, n_classes, 1)

    def forward(self, bottleneck: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        x = bottleneck
        for up, block, skip in zip(self.up, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class DomainClassifier(nn.Module):
    """Global average pooling, two dense layers, one logit."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(x))).squeeze(1)


class SubNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int):
        super().__init__()
        C = cfg.bottleneck_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(cfg.in_channels, cfg.base_width, cfg.depth)
            self.attention = SelfAttention(C, generator=torch.Generator().manual_seed(seed))
            self.classifier = DomainClassifier(C, cfg.classifier_hidden)


class MsatlModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 subnet_seeds: Optional[Sequence[int]] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        if subnet_seeds is None:
            subnet_seeds = [derive_seed(seed, 2, i) for i in range(1, cfg.N + 1)]
        if len(subnet_seeds) != cfg.N:
            raise ValueError(f"need {cfg.N} sub-network seeds, got {len(subnet_seeds)}")
        self.subnets = nn.ModuleList(SubNetwork(cfg, s) for s in subnet_seeds)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, 2, 0))
            self.predictor = Decoder(cfg.base_width, cfg.depth)
        if not cfg.use_attention:
            for sn in self.subnets:
                sn.attention.requires_grad_(False)

    @property
    def N(self) -> int:
        return self.cfg.N

    @property
    def lam(self) -> float:
        return self.cfg.lam

    def subnet(self, i: int) -> SubNetwork:
        if not 1 <= i <= self.N:
            raise IndexError(f"sub-network index must be in 1..{self.N}, got {i}")
        return self.subnets[i - 1]

    def optimizable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def clamp_mu(self) -> None:
        for sn in self.subnets:
            sn.attention.clamp_mu()


def build_model(config: Optional[ModelConfig] = None, seed: int = 0, **overrides) -> MsatlModel:
    config = config or ModelConfig()
    if overrides:
        config = ModelConfig(**{**asdict(config), **overrides})
    return MsatlModel(config, seed)


# ---------------------------------------------------------------------------
# Forward pieces


def _check_images(model: MsatlModel, x: torch.Tensor) -> None:
    cfg = model.cfg
    if x.dim() != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected B x {cfg.in_channels} x H x W images, got {tuple(x.shape)}")
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, "
                         f"got {x.shape[2]}x{x.shape[3]}")


def encode(model: MsatlModel, i: int, x: torch.Tensor) -> Features:
    """Raw encoder output of sub-network ``i`` (no attention)."""
    _check_images(model, x)
    return model.subnet(i).encoder(x)


def attend(model: MsatlModel, i: int, bottleneck: torch.Tensor) -> torch.Tensor:
    if not model.cfg.use_attention:
        return bottleneck
    return model.subnet(i).attention(bottleneck)


def extract_features(model: MsatlModel, i: int, x: torch.Tensor) -> Features:
    bottleneck, skips = encode(model, i, x)
    return attend(model, i, bottleneck), skips


def _features_and_domain_input(model: MsatlModel, i: int, x: torch.Tensor
                               ) -> Tuple[Features, torch.Tensor]:
    raw, skips = encode(model, i, x)
    attended = attend(model, i, raw)
    domain_in = raw if model.cfg.classifier_input == ENCODER_INPUT else attended
    return (attended, skips), domain_in


def domain_logit(model: MsatlModel, i: int, bottleneck: torch.Tensor,
                 reverse: bool = True) -> torch.Tensor:
    """Per-sample domain logit; ``reverse=False`` drops the reversal boundary."""
    sn = model.subnet(i)
    if bottleneck.dim() != 4 or bottleneck.shape[1] != sn.attention.C:
        raise ValueError(f"bottleneck shape {tuple(bottleneck.shape)} does not match "
                         f"{sn.attention.C} channels")
    if reverse:
        bottleneck = grad_reverse(bottleneck, model.lam)
    return sn.classifier(bottleneck)


def fuse(per_subnetwork: Sequence[Features]) -> Features:
    if not per_subnetwork:
        raise ValueError("nothing to fuse")
    bottleneck, skips = per_subnetwork[0]
    for b, s in per_subnetwork[1:]:
        if b.shape != bottleneck.shape or len(s) != len(skips):
            raise ValueError("sub-network features are not shape-compatible")
        bottleneck = bottleneck + b
        skips = [acc + t for acc, t in zip(skips, s)]
    return bottleneck, list(skips)


def fuse_and_predict(model: MsatlModel, per_subnetwork: Sequence[Features]) -> torch.Tensor:
    if len(per_subnetwork) != model.N:
        raise ValueError(f"expected features from {model.N} sub-networks, got {len(per_subnetwork)}")
    bottleneck, skips = fuse(per_subnetwork)
    return model.predictor(bottleneck, skips)


def predict_logits(model: MsatlModel, x: torch.Tensor) -> torch.Tensor:
    feats = [extract_features(model, i, x) for i in range(1, model.N + 1)]
    return fuse_and_predict(model, feats)


def infer(model: MsatlModel, x: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities (B x 2 x H x W) for images ``x``."""
    return torch.softmax(predict_logits(model, x), dim=1)


# ---------------------------------------------------------------------------
# Tensors from samples


def images_to_tensor(samples: Sequence[DomainSample], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([s.image for s in samples]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def masks_to_tensor(samples: Sequence[DomainSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))


# ---------------------------------------------------------------------------
# Loss


@dataclass
class LossBreakdown:
    """Loss terms of one batch.

    ``total`` is the bookkeeping objective ``l_p - lam * sum(l_adv)``.  The
    tensor actually back-propagated is ``surrogate = l_p + sum(l_adv)``: the
    classifiers descend on their losses while the reversal boundary hands
    everything upstream of it ``-lam`` times those gradients.
    """

    l_p: torch.Tensor
    l_adv: List[torch.Tensor]
    lam: float
    target_logits: Optional[torch.Tensor] = field(default=None, repr=False)

    @property
    def surrogate(self) -> torch.Tensor:
        return self.l_p + torch.stack(self.l_adv).sum()

    @property
    def total(self) -> float:
        return self.l_p.item() - self.lam * sum(l.item() for l in self.l_adv)

    def check_finite(self) -> None:
        if not torch.isfinite(self.l_p):
            raise FloatingPointError(f"prediction loss l_p is non-finite ({self.l_p.item()})")
        for i, l in enumerate(self.l_adv, start=1):
            if not torch.isfinite(l):
                raise FloatingPointError(f"domain loss l_adv[{i}] is non-finite ({l.item()})")

    def to_record(self) -> dict:
        return {"l_p": self.l_p.item(), "l_adv": [l.item() for l in self.l_adv],
                "total": self.total}


def segmentation_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, masks)


def domain_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def compute_loss(model: MsatlModel, batch: Batch, supervision_mode: str = TARGET_ONLY
                 ) -> LossBreakdown:
    """Composite loss of one batch.

    The target half of each sub-batch is encoded on its own, so its fused
    prediction is computed exactly as ``infer`` would compute it.  When the
    target halves differ across sub-batches, slot ``j`` fuses whatever each
    sub-network saw at position ``j`` and is supervised with the first
    sub-batch's mask.
    """
    if supervision_mode not in SUPERVISION_MODES:
        raise ValueError(f"supervision_mode must be one of {SUPERVISION_MODES}")
    if len(batch.sub_batches) != model.N:
        raise ValueError(f"batch has {len(batch.sub_batches)} sub-batches, model has N={model.N}")
    dtype = next(model.parameters()).dtype

    target_feats, l_adv = [], []
    for i, sb in enumerate(batch.sub_batches, start=1):
        if not sb.target_samples:
            raise ValueError("empty target half in sub-batch")
        xs = images_to_tensor(sb.source_samples, dtype)
        xt = images_to_tensor(sb.target_samples, dtype)
        if model.cfg.classifier_input == ENCODER_INPUT:
            ds = encode(model, i, xs)[0]  # attended source features are never used
        else:
            ds = _features_and_domain_input(model, i, xs)[1]
        ft, dt = _features_and_domain_input(model, i, xt)
        target_feats.append(ft)
        logits = domain_logit(model, i, torch.cat([ds, dt]))
        labels = torch.tensor(sb.source_labels + sb.target_labels)
        l_adv.append(domain_loss(logits, labels))

    target_logits = fuse_and_predict(model, target_feats)
    target_masks = masks_to_tensor(batch.sub_batches[0].target_samples)

    if supervision_mode == TARGET_ONLY:
        l_p = segmentation_loss(target_logits, target_masks)
    else:
        src = [s for sb in batch.sub_batches for s in sb.source_samples]
        src_logits = predict_logits(model, images_to_tensor(src, dtype))
        l_p = segmentation_loss(torch.cat([target_logits, src_logits]),
                                torch.cat([target_masks, masks_to_tensor(src)]))
    return LossBreakdown(l_p, l_adv, model.lam, target_logits)


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_bytes(model: MsatlModel, extra: Optional[dict] = None) -> bytes:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "seed": model.seed,
        "state": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def save_checkpoint(model: MsatlModel, path, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, extra))


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> MsatlModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    cfg = ModelConfig(**payload["config"])
    if expected is not None and asdict(expected) != asdict(cfg):
        raise ValueError(f"checkpoint config {asdict(cfg)} does not match expected "
                         f"{asdict(expected)}")
    model = MsatlModel(cfg, payload["seed"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model
