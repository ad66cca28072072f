"""Multi-source domain independent batching.

Every batch holds one sub-batch per source domain.  Each sub-batch is half
source samples (domain label 0) and half target samples (domain label 1),
and the target half is drawn once per batch and shared by all sub-batches,
so the per-source features of the same target images can later be summed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .data import TARGET, DomainDataset, DomainSample, derive_seed

SOURCE_LABEL = 0
TARGET_LABEL = 1

SHARED_TARGET = "shared"
INDEPENDENT_TARGET = "independent"
TARGET_MODES = (SHARED_TARGET, INDEPENDENT_TARGET)


@dataclass(frozen=True)
class BatcherConfig:
    n_b: int = 4
    N: int = 2
    seed: int = 0
    target_mode: str = SHARED_TARGET

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.n_b % self.N:
            raise ValueError(f"batch size {self.n_b} is not divisible by N={self.N}")
        if self.n_sub_b < 2 or self.n_sub_b % 2:
            raise ValueError(f"sub-batch size must be an even number >= 2, got {self.n_sub_b}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")

    @classmethod
    def from_sub_batch(cls, sub_batch_size: int, N: int, **kw) -> "BatcherConfig":
        return cls(n_b=sub_batch_size * N, N=N, **kw)

    @property
    def n_sub_b(self) -> int:
        return self.n_b // self.N

    @property
    def half(self) -> int:
        return self.n_sub_b // 2


@dataclass
class SubBatch:
    source_samples: List[DomainSample]
    target_samples: List[DomainSample]
    source_index: int

    @property
    def source_labels(self) -> List[int]:
        return [SOURCE_LABEL] * len(self.source_samples)

    @property
    def target_labels(self) -> List[int]:
        return [TARGET_LABEL] * len(self.target_samples)

    @property
    def target_ids(self) -> List[str]:
        return [s.sample_id for s in self.target_samples]


@dataclass
class Batch:
    sub_batches: List[SubBatch]
    batch_index: int

    def targets_shared(self) -> bool:
        """True when every sub-batch carries the same target ids in the same order."""
        first = self.sub_batches[0].target_ids
        return all(sb.target_ids == first for sb in self.sub_batches[1:])

    def to_record(self) -> dict:
        return {
            "batch_index": self.batch_index,
            "sub_batches": [
                {"source_index": sb.source_index,
                 "source_ids": [s.sample_id for s in sb.source_samples],
                 "target_ids": sb.target_ids}
                for sb in self.sub_batches
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())


class _Cursor:
    """Walks a shuffled order; reshuffles and wraps when exhausted."""

    def __init__(self, dataset: DomainDataset, seed: int):
        self.dataset = dataset
        self.seed = seed
        self.passes = 0
        self.order = self._shuffle()
        self.pos = 0

    def _shuffle(self) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(self.seed, self.passes))
        return rng.permutation(len(self.dataset))

    def take(self, k: int) -> List[DomainSample]:
        out = []
        for _ in range(k):
            if self.pos == len(self.order):
                self.passes += 1
                self.order = self._shuffle()
                self.pos = 0
            out.append(self.dataset.samples[self.order[self.pos]])
            self.pos += 1
        return out


@dataclass
class EpochPlan:
    cfg: BatcherConfig
    epoch: int
    batches_per_epoch: int
    source_cursors: List[_Cursor]
    target_cursors: List[_Cursor]
    emitted: int = 0

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        return next_batch(self)

    def __len__(self) -> int:
        return self.batches_per_epoch


def batches_per_epoch(source_sizes: Sequence[int], half: int) -> int:
    return math.ceil(max(source_sizes) / half)


def plan_epoch(target: DomainDataset, sources: Sequence[DomainDataset],
               cfg: BatcherConfig, epoch: int = 0) -> EpochPlan:
    if len(sources) != cfg.N:
        raise ValueError(f"config expects N={cfg.N} sources, got {len(sources)}")
    for ds in (target, *sources):
        if len(ds) < 1:
            raise ValueError("empty dataset")
    # Seed keys: (batch seed, epoch, domain id[, sub-batch slot]).
    src = [_Cursor(ds, derive_seed(cfg.seed, epoch, ds.domain_id)) for ds in sources]
    if cfg.target_mode == SHARED_TARGET:
        tgt = [_Cursor(target, derive_seed(cfg.seed, epoch, TARGET))]
    else:
        tgt = [_Cursor(target, derive_seed(cfg.seed, epoch, TARGET, i + 1)) for i in range(cfg.N)]
    total = batches_per_epoch([len(s) for s in sources], cfg.half)
    return EpochPlan(cfg, epoch, total, src, tgt)


def next_batch(plan: EpochPlan) -> Batch:
    """Emit the next batch; raises ``StopIteration`` at the end of the epoch."""
    if plan.emitted >= plan.batches_per_epoch:
        raise StopIteration
    half = plan.cfg.half
    if plan.cfg.target_mode == SHARED_TARGET:
        shared = plan.target_cursors[0].take(half)
        targets = [list(shared) for _ in plan.source_cursors]
    else:
        targets = [c.take(half) for c in plan.target_cursors]
    subs = [
        SubBatch(cursor.take(half), targets[i], cursor.dataset.domain_id)
        for i, cursor in enumerate(plan.source_cursors)
    ]
    batch = Batch(subs, plan.emitted)
    plan.emitted += 1
    return batch
