"""Typed sample sets, manifest loading and seeded batching."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .datagen import Manifest, SampleRecord, read_manifest, to_uint8

FLIP_PROB = 0.5
JITTER_PROB = 0.5
BRIGHTNESS_RANGE = 0.05
CONTRAST_RANGE = 0.1


class LoadError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    label: int
    domain_id: int
    sample_id: str
    split: str = "train"


@dataclass(frozen=True, eq=False)
class SampleSet:
    samples: tuple[Sample, ...]
    name: str = "S_m"

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def domain_ids(self) -> np.ndarray:
        return np.array([s.domain_id for s in self.samples], dtype=np.int64)

    def images(self) -> np.ndarray:
        """Stacked N x 3 x H x W float32 array (channels first)."""
        if not self.samples:
            return np.zeros((0, 3, 0, 0), dtype=np.float32)
        return np.stack([s.image for s in self.samples]).transpose(0, 3, 1, 2).copy()

    def subset(self, keep, name: str | None = None) -> "SampleSet":
        """Samples for which ``keep(sample)`` is true, order preserved."""
        return SampleSet(tuple(s for s in self.samples if keep(s)), name or self.name)

    def select_ids(self, ids: Sequence[str], name: str) -> "SampleSet":
        """Samples with the given ids, in the order given."""
        by_id = {s.sample_id: s for s in self.samples}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise KeyError(f"unknown sample ids: {missing[:5]}")
        return SampleSet(tuple(by_id[i] for i in ids), name)

    def split(self, split: str) -> "SampleSet":
        return self.subset(lambda s: s.split == split, f"{self.name}:{split}")

    def union(self, other: "SampleSet", name: str) -> "SampleSet":
        return SampleSet(self.samples + other.samples, name)


def _load_png(path: Path, sample_id: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise LoadError(f"sample {sample_id}: cannot read {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def load_manifest(path: str | Path, name: str = "S_m") -> SampleSet:
    """Load every image referenced by a manifest into a ``SampleSet``."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"manifest not found: {path}")
    try:
        manifest = read_manifest(path)
    except ValueError as exc:
        raise LoadError(str(exc)) from exc
    root = path.parent
    seen = set()
    samples = []
    for rec in manifest.records:
        sid = rec.sample_id
        if sid in seen:
            raise LoadError(f"sample {sid}: duplicate sample_id")
        seen.add(sid)
        img = _load_png(root / rec.relative_path, sid)
        if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
            raise LoadError(f"sample {sid}: pixel values out of [0, 1]")
        samples.append(Sample(img, rec.label, rec.domain_id, sid, rec.split))
    return SampleSet(tuple(samples), name)


def save_sampleset(sset: SampleSet, out_dir: str | Path) -> Path:
    """Write a set as PNGs plus a manifest; returns the manifest path.

    Pixels are stored as 8-bit, so only sets whose pixels are multiples of
    1/255 round-trip exactly (true for anything read by ``load_manifest``).
    """
    out_dir = Path(out_dir)
    records = []
    for s in sset:
        rel = f"{s.domain_id:02d}/{s.sample_id}.png"
        p = out_dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(s.image), mode="RGB").save(p, format="PNG")
        records.append(SampleRecord(rel, s.label, s.domain_id, s.split))
    mpath = out_dir / "manifest.txt"
    Manifest(records).write(mpath)
    return mpath


@dataclass(frozen=True, eq=False)
class Batch:
    samples: tuple[Sample, ...]
    images: np.ndarray  # N x 3 x H x W float32
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)


def _sample_key(sample_id: str) -> int:
    return zlib.crc32(sample_id.encode("utf-8"))


def augment(image: np.ndarray, seed: int, epoch: int, sample_id: str) -> np.ndarray:
    """Horizontal flip and brightness/contrast jitter on an H x W x 3 image.

    Fully determined by ``(seed, epoch, sample_id)``.
    """
    rng = np.random.default_rng([seed, epoch, _sample_key(sample_id)])
    flip, jitter = rng.random(2)
    b, c = rng.uniform(-1.0, 1.0, size=2)
    out = image
    if flip < FLIP_PROB:
        out = out[:, ::-1, :]
    if jitter < JITTER_PROB:
        mean = out.mean()
        out = (out - mean) * (1.0 + CONTRAST_RANGE * c) + mean + BRIGHTNESS_RANGE * b
        out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def batches(
    sset: SampleSet,
    batch_size: int = 32,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    augment_images: bool = False,
) -> Iterator[Batch]:
    """One epoch of batches; the permutation depends on ``(seed, epoch)``.

    The last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(sset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        chosen = tuple(sset.samples[i] for i in idx)
        if augment_images:
            imgs = [augment(s.image, seed, epoch, s.sample_id) for s in chosen]
        else:
            imgs = [s.image for s in chosen]
        images = np.stack(imgs).transpose(0, 3, 1, 2).copy()
        labels = np.array([s.label for s in chosen], dtype=np.int64)
        yield Batch(chosen, images, labels)
