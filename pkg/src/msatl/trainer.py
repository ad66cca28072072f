"""Training loop, ablation switches and evaluation."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .batching import INDEPENDENT_TARGET, SHARED_TARGET, BatcherConfig, plan_epoch
from .data import DomainDataset, derive_seed
from .metrics import MetricReport, aggregate, image_metrics
from .model import (
    SUPERVISION_MODES,
    TARGET_ONLY,
    ModelConfig,
    MsatlModel,
    compute_loss,
    images_to_tensor,
    infer,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_attention", "independent_target")

# Purpose keys for expanding the root seed.
SEED_INIT = 2
SEED_BATCH = 3


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    lam: float = 0.3
    sub_batch_size: int = 2
    ablation: str = "none"
    supervision_mode: str = TARGET_ONLY

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.sub_batch_size < 2 or self.sub_batch_size % 2:
            raise ValueError(f"sub_batch_size must be an even number >= 2, got "
                             f"{self.sub_batch_size}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ValueError(f"supervision_mode must be one of {SUPERVISION_MODES}")


@dataclass(frozen=True)
class AblationSwitch:
    use_attention: bool
    target_mode: str


def apply_ablation(cfg: TrainConfig) -> AblationSwitch:
    if cfg.ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {cfg.ablation!r}")
    return AblationSwitch(
        use_attention=cfg.ablation != "no_attention",
        target_mode=INDEPENDENT_TARGET if cfg.ablation == "independent_target" else SHARED_TARGET,
    )


def model_config_for(cfg: TrainConfig, base: Optional[ModelConfig] = None, N: int = 2) -> ModelConfig:
    base = base or ModelConfig(N=N)
    switch = apply_ablation(cfg)
    return ModelConfig(**{**asdict(base), "lam": cfg.lam, "use_attention": switch.use_attention})


def init_model(cfg: TrainConfig, base: Optional[ModelConfig] = None, N: int = 2) -> MsatlModel:
    """Model seeded from the run's root seed; identical across ablations."""
    return MsatlModel(model_config_for(cfg, base, N), derive_seed(cfg.seed, SEED_INIT))


def batcher_config(cfg: TrainConfig, N: int) -> BatcherConfig:
    return BatcherConfig.from_sub_batch(cfg.sub_batch_size, N,
                                        seed=derive_seed(cfg.seed, SEED_BATCH),
                                        target_mode=apply_ablation(cfg).target_mode)


@dataclass
class EpochRecord:
    epoch: int
    l_p: float
    l_adv: List[float]
    total: float
    val: dict
    mu: List[float]
    seconds: float = 0.0

    def to_record(self) -> dict:
        # Wall-clock time stays out of serialized history so runs are byte-reproducible.
        rec = asdict(self)
        rec.pop("seconds")
        return rec


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: List[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dice: float = -1.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_record()) + "\n" for e in self.epochs)


def _configure_torch() -> None:
    torch.use_deterministic_algorithms(True)


def train(model: MsatlModel, target: DomainDataset, sources: Sequence[DomainDataset],
          cfg: TrainConfig, val: Optional[DomainDataset] = None, out_dir=None,
          record_steps: bool = True, restore_best: bool = True,
          on_step: Optional[Callable[[int, int, object], None]] = None
          ) -> Tuple[MsatlModel, TrainHistory]:
    """Train all sub-networks and the fusion decoder jointly.

    With ``val`` given, the weights with the best validation Dice are kept
    (and restored on return when ``restore_best``).  ``out_dir`` receives
    ``history.jsonl``, ``checkpoint_best.pt`` and ``checkpoint_last.pt``.
    """
    cfg.validate()
    switch = apply_ablation(cfg)
    if model.cfg.use_attention != switch.use_attention:
        raise ValueError(f"model use_attention={model.cfg.use_attention} does not match "
                         f"ablation {cfg.ablation!r}")
    if model.lam != cfg.lam:
        raise ValueError(f"model lambda {model.lam} != config lambda {cfg.lam}")
    _configure_torch()
    bcfg = batcher_config(cfg, model.N)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.jsonl").write_text("")

    optimizer = torch.optim.Adam(model.optimizable_parameters(), lr=cfg.learning_rate)
    history = TrainHistory()
    best_state = None
    extra = {"train": asdict(cfg)}

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        model.train()
        sums_p, sums_adv, sums_total, n = 0.0, np.zeros(model.N), 0.0, 0
        for batch in plan_epoch(target, sources, bcfg, epoch):
            losses = compute_loss(model, batch, cfg.supervision_mode)
            losses.check_finite()
            optimizer.zero_grad()
            losses.surrogate.backward()
            optimizer.step()
            model.clamp_mu()

            rec = losses.to_record()
            if record_steps:
                history.steps.append({"epoch": epoch, "batch": batch.batch_index, **rec})
            if on_step is not None:
                on_step(epoch, batch.batch_index, losses)
            sums_p += rec["l_p"]
            sums_adv += np.array(rec["l_adv"])
            sums_total += rec["total"]
            n += 1

        val_summary = {}
        if val is not None:
            report = evaluate(model, val)
            val_summary = {"dice": report.mean["dice"], "iou": report.mean["iou"]}
        record = EpochRecord(
            epoch=epoch,
            l_p=sums_p / n,
            l_adv=(sums_adv / n).tolist(),
            total=sums_total / n,
            val=val_summary,
            mu=[sn.attention.mu.item() for sn in model.subnets],
            seconds=time.perf_counter() - start,
        )
        history.epochs.append(record)
        log.info("epoch %d  l_p=%.4f  l_adv=%s  total=%.4f  val=%s  (%.1fs)", epoch, record.l_p,
                 ["%.4f" % v for v in record.l_adv], record.total, val_summary, record.seconds)

        improved = val is not None and val_summary["dice"] > history.best_val_dice
        if improved:
            history.best_epoch, history.best_val_dice = epoch, val_summary["dice"]
            best_state = copy.deepcopy(model.state_dict())
        if out is not None:
            with open(out / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record.to_record()) + "\n")
            ep_extra = {**extra, "epoch": epoch}
            if improved:
                save_checkpoint(model, out / "checkpoint_best.pt", ep_extra)
            save_checkpoint(model, out / "checkpoint_last.pt", ep_extra)

    if out is not None and val is None:
        save_checkpoint(model, out / "checkpoint_best.pt", {**extra, "epoch": cfg.epochs - 1})
    if restore_best and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


@torch.no_grad()
def predict_masks(model: MsatlModel, dataset: DomainDataset, threshold: float = 0.5,
                  batch_size: int = 8) -> List[np.ndarray]:
    model.eval()
    dtype = next(model.parameters()).dtype
    masks = []
    for k in range(0, len(dataset), batch_size):
        chunk = dataset.samples[k:k + batch_size]
        probs = infer(model, images_to_tensor(chunk, dtype))
        masks.extend((probs[:, 1] > threshold).numpy().astype(np.uint8))
    return masks


def evaluate(model: MsatlModel, dataset: DomainDataset, beta: float = 1.0,
             threshold: float = 0.5,
             predict: Optional[Callable[[DomainDataset], List[np.ndarray]]] = None
             ) -> MetricReport:
    """Per-image metrics of thresholded predictions, plus mean and std.

    ``predict`` replaces the model's own prediction (one binary mask per sample).
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    preds = predict(dataset) if predict is not None else predict_masks(model, dataset, threshold)
    rows = [image_metrics(p, s.mask, beta, s.sample_id) for p, s in zip(preds, dataset)]
    return aggregate(rows, beta)
