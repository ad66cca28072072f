"""Domain datasets: loading, part-wise noise forging, toy corpus, splitting.

Domain identities are plain integers: ``TARGET`` (0) for the target domain
and ``i >= 1`` for source ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

TARGET = 0

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Part names produced by the toy generator, in source order.
TOY_PART_NAMES = ("body", "wheels", "roof")
MAX_TOY_PARTS = 8


def domain_name(domain_id: int) -> str:
    return "target" if domain_id == TARGET else f"source_{domain_id}"


def derive_seed(root: int, *keys: int) -> int:
    """Expand a root seed into an independent per-purpose seed."""
    seq = np.random.SeedSequence([int(root), *[int(k) for k in keys]])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


@dataclass
class PartAnnotation:
    part_masks: Dict[str, np.ndarray]

    def __post_init__(self):
        self.part_masks = {k: np.asarray(v).astype(bool) for k, v in self.part_masks.items()}
        shapes = {m.shape for m in self.part_masks.values()}
        if len(shapes) > 1:
            raise ValueError(f"part masks have differing shapes: {sorted(shapes)}")
        names = list(self.part_masks)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if np.any(self.part_masks[a] & self.part_masks[b]):
                    raise ValueError(f"parts {a!r} and {b!r} overlap")

    @property
    def names(self) -> List[str]:
        return list(self.part_masks)

    def union(self) -> np.ndarray:
        masks = list(self.part_masks.values())
        out = np.zeros_like(masks[0])
        for m in masks:
            out |= m
        return out

    def check_covers(self, mask: np.ndarray) -> None:
        if not np.array_equal(self.union(), np.asarray(mask).astype(bool)):
            raise ValueError("union of part masks does not equal the object mask")


@dataclass
class DomainSample:
    image: np.ndarray  # H x W x 3, uint8
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    domain_id: int
    sample_id: str
    parts: Optional[PartAnnotation] = field(default=None, compare=False)

    def __post_init__(self):
        if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.sample_id}: image must be HxWx3 uint8, got "
                             f"{self.image.dtype} {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"{self.sample_id}: mask shape {self.mask.shape} != image "
                             f"shape {self.image.shape[:2]}")
        bad = np.setdiff1d(np.unique(self.mask), [0, 1])
        if bad.size:
            raise ValueError(f"{self.sample_id}: mask values outside {{0,1}}: {bad.tolist()}")
        self.mask = self.mask.astype(np.uint8, copy=False)


@dataclass
class DomainDataset:
    samples: List[DomainSample]
    domain_id: int

    def __post_init__(self):
        if not self.samples:
            raise ValueError("no samples found")
        ids = set()
        for s in self.samples:
            if s.domain_id != self.domain_id:
                raise ValueError(f"sample {s.sample_id} has domain {s.domain_id}, "
                                 f"dataset is {self.domain_id}")
            if s.sample_id in ids:
                raise ValueError(f"duplicate sample_id {s.sample_id}")
            ids.add(s.sample_id)

    @property
    def size(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> DomainSample:
        return self.samples[idx]

    def __iter__(self):
        return iter(self.samples)


@dataclass(frozen=True)
class NoiseSpec:
    mean: float = 127.0
    variance: float = 255.0
    seed: int = 0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"noise variance must be >= 0, got {self.variance}")


# ---------------------------------------------------------------------------
# Disk I/O


def _read_mask(path: Path) -> np.ndarray:
    raw = np.asarray(Image.open(path))
    if raw.ndim == 3:
        raw = raw[..., 0]
    bad = np.setdiff1d(np.unique(raw), [0, 255])
    if bad.size:
        raise ValueError(f"mask {path.name} has non-binary values: {bad.tolist()}")
    return (raw == 255).astype(np.uint8)


def _write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def load_dataset(root, domain_id: int) -> DomainDataset:
    """Load ``<root>/images`` + ``<root>/masks`` (and optional ``<root>/parts/<name>``)."""
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    images = {}
    if image_dir.is_dir():
        images = {p.stem: p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    if not images:
        raise ValueError(f"no samples found under {root}")
    part_dirs = sorted(p for p in (root / "parts").iterdir() if p.is_dir()) \
        if (root / "parts").is_dir() else []

    samples = []
    for stem in sorted(images):
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.exists():
            raise ValueError(f"missing mask for image {stem!r}")
        image = np.asarray(Image.open(images[stem]).convert("RGB"), dtype=np.uint8)
        mask = _read_mask(mask_path)
        parts = None
        if part_dirs:
            parts = PartAnnotation({d.name: _read_mask(d / f"{stem}.png") for d in part_dirs})
        samples.append(DomainSample(image, mask, domain_id, stem, parts))
    return DomainDataset(samples, domain_id)


def save_dataset(ds: DomainDataset, root) -> None:
    root = Path(root)
    for s in ds:
        _write_png(root / "images" / f"{s.sample_id}.png", s.image)
        _write_png(root / "masks" / f"{s.sample_id}.png", s.mask * np.uint8(255))
        if s.parts is not None:
            for name, m in s.parts.part_masks.items():
                _write_png(root / "parts" / name / f"{s.sample_id}.png",
                           m.astype(np.uint8) * np.uint8(255))


def load_parts(parts_root, stem: str) -> PartAnnotation:
    """Read ``<parts_root>/<part>/<stem>.png`` for every part directory."""
    parts_root = Path(parts_root)
    dirs = sorted(p for p in parts_root.iterdir() if p.is_dir()) if parts_root.is_dir() else []
    if not dirs:
        raise ValueError(f"no part directories under {parts_root}")
    return PartAnnotation({d.name: _read_mask(d / f"{stem}.png") for d in dirs})


# ---------------------------------------------------------------------------
# Forging


def gaussian_noise(n_pixels: int, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """``n_pixels x 3`` uint8 draws of clip(round(N(mean, variance)), 0, 255)."""
    draws = rng.normal(noise.mean, math.sqrt(noise.variance), size=(n_pixels, 3))
    return np.clip(np.rint(draws), 0, 255).astype(np.uint8)


def forge_source(sample: DomainSample, parts: PartAnnotation, keep_part: str,
                 noise: NoiseSpec, source_index: int = 1) -> DomainSample:
    """Occlude every part except ``keep_part`` with Gaussian noise and drop it from the mask.

    Noise is drawn per occluded pixel per channel, in raster order, from a
    generator seeded with ``noise.seed``.
    """
    if keep_part not in parts.part_masks:
        raise KeyError(f"unknown part {keep_part!r}; known parts: {parts.names}")
    if parts.union().shape != sample.mask.shape:
        raise ValueError(f"{sample.sample_id}: part masks do not match image shape")

    occluded = np.zeros(sample.mask.shape, dtype=bool)
    for name, m in parts.part_masks.items():
        if name != keep_part:
            occluded |= m

    image = sample.image.copy()
    rng = np.random.default_rng(noise.seed)
    image[occluded] = gaussian_noise(int(occluded.sum()), noise, rng)
    mask = (sample.mask.astype(bool) & parts.part_masks[keep_part]).astype(np.uint8)
    return DomainSample(image, mask, source_index, sample.sample_id)


def forge_dataset(ds: DomainDataset, parts: Sequence[PartAnnotation], keep_part: str,
                  noise: NoiseSpec, source_index: int = 1) -> DomainDataset:
    """Forge every sample; sample ``k`` uses a noise seed derived from ``(noise.seed, k)``."""
    out = []
    for k, (s, p) in enumerate(zip(ds.samples, parts)):
        spec = replace(noise, seed=derive_seed(noise.seed, k))
        out.append(forge_source(s, p, keep_part, spec, source_index))
    return DomainDataset(out, source_index)


# ---------------------------------------------------------------------------
# Toy corpus


@dataclass
class ToyConfig:
    image_size: int = 64
    n_target: int = 40
    n_source: int = 80
    n_parts: int = 2
    noise_mean: float = 127.0
    noise_variance: float = 255.0

    def validate(self) -> None:
        if self.n_parts < 1:
            raise ValueError(f"n_parts must be >= 1, got {self.n_parts}")
        if self.n_parts > MAX_TOY_PARTS:
            raise ValueError(f"n_parts must be <= {MAX_TOY_PARTS}, got {self.n_parts}")
        if self.n_target < 1 or self.n_source < 1:
            raise ValueError("sample counts must be >= 1")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")


def toy_part_names(n_parts: int) -> List[str]:
    names = list(TOY_PART_NAMES[:n_parts])
    names += [f"light_{k}" for k in range(len(names) + 1, n_parts + 1)]
    return names


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(60, 200, size=3)
    tilt = rng.uniform(-50, 50, size=(2, 3))
    img = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    # Low-frequency blobs plus fine grain.
    coarse = rng.normal(0, 18, size=(size // 8 + 1, size // 8 + 1, 3))
    img = img + np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    img = img + rng.normal(0, 6, size=(size, size, 3))
    return img


def _toy_scene(size: int, n_parts: int, rng: np.random.Generator) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    s = size / 64.0
    img = _background(size, rng)
    yy, xx = np.mgrid[0:size, 0:size]

    bw = int(rng.integers(int(30 * s), int(42 * s) + 1))
    bh = int(rng.integers(int(12 * s), int(17 * s) + 1))
    x0 = int(rng.integers(int(4 * s), size - bw - int(4 * s) + 1))
    y0 = int(rng.integers(int(20 * s), size - bh - int(10 * s) + 1))
    body = (xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)
    parts: Dict[str, np.ndarray] = {}

    body_color = rng.uniform(0, 255, size=3)
    body_color[rng.integers(3)] = rng.uniform(200, 255)  # keep it saturated
    shade = 1.0 + 0.25 * (yy - y0) / max(bh, 1)
    img[body] = (body_color * shade[..., None])[body]

    if n_parts >= 2:
        r = float(rng.uniform(4.5 * s, 6.5 * s))
        cy = y0 + bh
        wheels = np.zeros_like(body)
        hubs = np.zeros_like(body)
        for cx in (x0 + 0.22 * bw, x0 + 0.78 * bw):
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            wheels |= d2 <= r * r
            hubs |= d2 <= (0.4 * r) ** 2
        tyre = rng.uniform(15, 55)
        img[wheels] = tyre + rng.normal(0, 4, size=(int(wheels.sum()), 3))
        img[hubs] = rng.uniform(170, 220)
        body = body & ~wheels
        parts["wheels"] = wheels

    if n_parts >= 3:
        rw = int(bw * rng.uniform(0.45, 0.6))
        rh = int(rng.integers(int(6 * s), int(9 * s) + 1))
        rx0 = x0 + int(rng.integers(2, max(3, bw - rw - 1)))
        roof = (xx >= rx0) & (xx < rx0 + rw) & (yy >= y0 - rh) & (yy < y0)
        img[roof] = np.clip(body_color * 0.55 + 70, 0, 255)
        parts["roof"] = roof

    for k in range(4, n_parts + 1):
        lx = x0 + 2 + 4 * (k - 4)
        light = (xx >= lx) & (xx < lx + 3) & (yy >= y0 + 2) & (yy < y0 + 5) & body
        img[light] = (255, 235, 90)
        body = body & ~light
        parts[f"light_{k}"] = light

    parts = {"body": body, **parts}
    ordered = {name: parts[name] for name in toy_part_names(n_parts)}
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), ordered


def _toy_sample(size: int, n_parts: int, seed: int, domain_id: int, sample_id: str) -> DomainSample:
    rng = np.random.default_rng(seed)
    image, parts = _toy_scene(size, n_parts, rng)
    ann = PartAnnotation(parts)
    mask = ann.union().astype(np.uint8)
    return DomainSample(image, mask, domain_id, sample_id, ann)


def generate_toy_corpus(config: Optional[ToyConfig] = None, seed: int = 0
                        ) -> Tuple[DomainDataset, List[DomainDataset]]:
    """Synthetic cars: a target corpus plus one forged source per part.

    Source ``i`` is forged from a shared pool of ``n_source`` original scenes,
    keeping only part ``i`` (body, wheels, ...) visible and labelled.
    """
    config = config or ToyConfig()
    config.validate()
    size, n = config.image_size, config.n_parts
    target = [_toy_sample(size, n, derive_seed(seed, 1, k), TARGET, f"t{k:04d}")
              for k in range(config.n_target)]
    originals = [_toy_sample(size, n, derive_seed(seed, 2, k), TARGET, f"s{k:04d}")
                 for k in range(config.n_source)]

    sources = []
    for i, name in enumerate(toy_part_names(n), start=1):
        forged = []
        for k, orig in enumerate(originals):
            noise = NoiseSpec(config.noise_mean, config.noise_variance, derive_seed(seed, 3, i, k))
            forged.append(forge_source(orig, orig.parts, name, noise, source_index=i))
        sources.append(DomainDataset(forged, i))
    return DomainDataset(target, TARGET), sources


def save_toy_corpus(target: DomainDataset, sources: Sequence[DomainDataset], out) -> None:
    out = Path(out)
    save_dataset(target, out / "target")
    for src in sources:
        save_dataset(src, out / domain_name(src.domain_id))


# ---------------------------------------------------------------------------
# Splitting


def split_counts(n: int, ratios: Sequence[float]) -> Tuple[int, ...]:
    """Floor allocation for every split after the first; the first takes the remainder."""
    tail = [math.floor(n * r + 1e-9) for r in ratios[1:]]
    return (n - sum(tail), *tail)


def split_dataset(ds: DomainDataset, ratios: Sequence[float] = (0.6, 0.2, 0.2),
                  seed: int = 0) -> Tuple[DomainDataset, DomainDataset, DomainDataset]:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    counts = split_counts(len(ds), ratios)
    if min(counts) < 1:
        raise ValueError(f"split of {len(ds)} samples by {tuple(ratios)} leaves an empty "
                         f"split {counts}")
    order = np.random.default_rng(seed).permutation(len(ds))
    bounds = np.cumsum((0, *counts))
    return tuple(  # type: ignore[return-value]
        DomainDataset([ds.samples[j] for j in order[bounds[k]:bounds[k + 1]]], ds.domain_id)
        for k in range(3)
    )
