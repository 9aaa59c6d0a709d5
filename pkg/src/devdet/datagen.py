"""Procedural multi-domain real/fake image benchmark.

Every domain has its own background texture and colour, which makes images
from different domains far apart in pixel space. Fakes carry a small,
localized additive trace. Inter-domain variation therefore dominates the
real/fake variation by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

TEXTURE_KINDS = ("stripes", "checker", "blobs", "gradient", "speckle")
ELLIPSE_PROFILES = ("blended", "hard")
TRACE_KINDS = ("ellipse", "ripple", "channel_offset")

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

MANIFEST_MAGIC = "# devdet-manifest v1"
RECORD_FIELDS = ("relative_path", "label", "domain_id", "split")


class ConfigError(ValueError):
    """Raised when a benchmark configuration is invalid.

    ``violations`` lists every problem found, not just the first one.
    """

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    texture_kind: str
    color_mean: tuple[float, float, float]
    color_jitter: float
    trace_amplitude: float
    trace_kind: str
    texture_contrast: float = 0.15
    texture_scale: float = 6.0
    # Every image of this domain carries one natural, trace-shaped blemish
    # whose amplitude is half-normal with this scale; 0 disables it.
    blemish_amplitude: float = 0.0
    # Std of i.i.d. per-pixel sensor noise.
    pixel_noise: float = 0.01
    # Fraction of this domain's training-split reals / fakes actually used for
    # training; the remainder moves to the validation split. Real multi-domain
    # collections are rarely balanced per source, and an uneven per-domain class
    # prior is what shifts a pooled detector's scores domain by domain.
    train_real_fraction: float = 1.0
    train_fake_fraction: float = 1.0
    # Ellipse traces only: per-channel tint and radial profile ("blended" fades
    # to zero at the rim, "hard" is a flat disc).
    trace_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    trace_profile: str = "blended"

    def validate(self) -> list[str]:
        errs = []
        if self.texture_kind not in TEXTURE_KINDS:
            errs.append(f"domain {self.domain_id}: unknown texture_kind {self.texture_kind!r}")
        if self.trace_kind not in TRACE_KINDS:
            errs.append(f"domain {self.domain_id}: unknown trace_kind {self.trace_kind!r}")
        if len(self.color_mean) != 3 or any(not 0.0 <= c <= 1.0 for c in self.color_mean):
            errs.append(f"domain {self.domain_id}: color_mean must be 3 values in [0,1]")
        if not 0.0 < self.trace_amplitude <= 0.2:
            errs.append(f"domain {self.domain_id}: trace_amplitude must be in (0, 0.2]")
        if self.color_jitter < 0:
            errs.append(f"domain {self.domain_id}: color_jitter must be >= 0")
        if self.texture_contrast < 0:
            errs.append(f"domain {self.domain_id}: texture_contrast must be >= 0")
        if not 0.0 <= self.blemish_amplitude <= 0.2:
            errs.append(f"domain {self.domain_id}: blemish_amplitude must be in [0, 0.2]")
        if not 0.0 <= self.pixel_noise <= 0.5:
            errs.append(f"domain {self.domain_id}: pixel_noise must be in [0, 0.5]")
        for name in ("train_real_fraction", "train_fake_fraction"):
            if not 0.05 <= getattr(self, name) <= 1.0:
                errs.append(f"domain {self.domain_id}: {name} must be in [0.05, 1]")
        if len(self.trace_tint) != 3 or any(not 0.0 <= c <= 1.0 for c in self.trace_tint):
            errs.append(f"domain {self.domain_id}: trace_tint must be 3 values in [0,1]")
        if self.trace_profile not in ELLIPSE_PROFILES:
            errs.append(f"domain {self.domain_id}: unknown trace_profile {self.trace_profile!r}")
        return errs


@dataclass(frozen=True)
class BenchmarkConfig:
    domains: tuple[DomainSpec, ...]
    images_per_domain_per_class: int = 200
    image_size: int = 32
    seed: int = 0
    holdout_domain_ids: tuple[int, ...] = ()

    def validate(self) -> list[str]:
        errs = []
        for d in self.domains:
            errs.extend(d.validate())
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            errs.append("domain ids must be unique")
        if not self.domains:
            errs.append("at least one domain is required")
        if self.image_size < 32:
            errs.append("image_size must be >= 32")
        if self.images_per_domain_per_class < 100:
            errs.append("images_per_domain_per_class must be >= 100")
        extra = set(self.holdout_domain_ids) - set(ids)
        if extra:
            errs.append(f"holdout ids {sorted(extra)} are not domain ids")
        for i, a in enumerate(self.domains):
            for b in self.domains[i + 1:]:
                dist = float(np.linalg.norm(np.subtract(a.color_mean, b.color_mean)))
                if a.texture_kind == b.texture_kind and dist < 0.3:
                    errs.append(
                        f"domains {a.domain_id} and {b.domain_id} share texture "
                        f"{a.texture_kind!r} and colours only {dist:.3f} apart (need >= 0.3)"
                    )
        train_kinds = {d.trace_kind for d in self.domains if d.domain_id not in self.holdout_domain_ids}
        for d in self.domains:
            if d.domain_id in self.holdout_domain_ids and d.trace_kind in train_kinds:
                errs.append(f"holdout domain {d.domain_id} reuses training trace kind {d.trace_kind!r}")
        return errs

    def check(self) -> None:
        errs = self.validate()
        if errs:
            raise ConfigError(errs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = [asdict(x) for x in self.domains]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        domains = tuple(
            DomainSpec(**{**x, "color_mean": tuple(x["color_mean"]),
                          **({"trace_tint": tuple(x["trace_tint"])} if "trace_tint" in x else {})})
            for x in d.pop("domains")
        )
        d["holdout_domain_ids"] = tuple(d.get("holdout_domain_ids", ()))
        return cls(domains=domains, **d)


def default_benchmark_config(seed: int = 7) -> BenchmarkConfig:
    """Four training domains plus one holdout domain with an unseen trace kind.

    Every training fake carries the same faint warm disc. Domain 0 is clean
    and balanced, so the detector can learn what the disc looks like. Domains
    1-3 add sensor noise that makes the disc only just visible, and they
    contribute few training fakes. A detector trained on the pooled set ranks
    those domains well but places their scores below the shared threshold.
    """
    warm = dict(trace_amplitude=0.07, trace_kind="ellipse", texture_contrast=0.04,
                trace_profile="hard", trace_tint=(1.0, 0.8, 0.6))
    scarce = dict(pixel_noise=0.1, train_fake_fraction=0.08)
    domains = (
        DomainSpec(0, "stripes", (0.80, 0.25, 0.20), 0.03, **warm),
        DomainSpec(1, "checker", (0.20, 0.75, 0.25), 0.03, **warm, **scarce),
        DomainSpec(2, "blobs", (0.25, 0.25, 0.80), 0.03, **warm, **scarce),
        DomainSpec(3, "speckle", (0.80, 0.75, 0.25), 0.03, **warm, **scarce),
        DomainSpec(4, "speckle", (0.50, 0.50, 0.50), 0.03, 0.2, "channel_offset", texture_contrast=0.03),
    )
    return BenchmarkConfig(domains, 800, 32, seed, (4,))


# -- rendering ---------------------------------------------------------------


def _sample_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def render_texture(kind: str, size: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Single-channel texture in [-1, 1] with small per-sample variation."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "stripes":
        theta = 0.6 + rng.normal(0, 0.03)
        phase = rng.normal(0, 0.3)
        return np.sin(2 * np.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / scale + phase)
    if kind == "checker":
        ox, oy = rng.normal(0, 0.5, size=2)
        return np.tanh(3 * np.sin(np.pi * (xx + ox) / scale) * np.sin(np.pi * (yy + oy) / scale))
    if kind == "blobs":
        out = np.zeros((size, size))
        for k in range(4):
            cy = size * (0.25 + 0.5 * (k // 2)) + rng.normal(0, 1.0)
            cx = size * (0.25 + 0.5 * (k % 2)) + rng.normal(0, 1.0)
            r = scale * rng.uniform(0.9, 1.1)
            out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        return np.clip(2 * out - 1, -1, 1)
    if kind == "gradient":
        theta = rng.uniform(-0.3, 0.3)
        t = (xx * math.cos(theta) + yy * math.sin(theta)) / size
        return 2 * t - 1
    if kind == "speckle":
        noise = rng.normal(0, 1, size=(size, size))
        smooth = (noise + np.roll(noise, 1, 0) + np.roll(noise, 1, 1) + np.roll(noise, (1, 1), (0, 1))) / 4
        return np.clip(smooth, -1, 1)
    raise ValueError(f"unknown texture kind {kind!r}")


def render_clean(spec: DomainSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Real (untraced) image of one domain, H x W x 3 in [0, 1]."""
    tex = render_texture(spec.texture_kind, size, spec.texture_scale, rng)
    shift = rng.normal(0, spec.color_jitter, size=3)
    img = np.asarray(spec.color_mean)[None, None, :] + shift + spec.texture_contrast * tex[..., None]
    img = img + rng.normal(0, spec.pixel_noise, size=img.shape)
    if spec.blemish_amplitude > 0:
        amp = min(0.2, spec.blemish_amplitude * abs(rng.normal()))
        if amp > 0:
            blemish = replace(spec, trace_kind="ellipse", trace_amplitude=amp)
            img = img + trace_field(blemish, size, rng)[0]
    return np.clip(img, 0.0, 1.0)


def trace_field(spec: DomainSpec, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Additive trace and its support mask.

    Returns ``(field, mask)`` where ``field`` is H x W x 3 and ``mask`` is a
    boolean H x W array of the pixels the trace may touch. The mask covers
    roughly 8-14% of the image.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    amp = spec.trace_amplitude
    frac = rng.uniform(0.08, 0.14)
    if spec.trace_kind == "ellipse":
        area = frac * size * size
        ratio = rng.uniform(0.7, 1.4)
        a = math.sqrt(area / (np.pi * ratio))
        b = a * ratio
        cy = rng.uniform(b, size - b)
        cx = rng.uniform(a, size - a)
        r2 = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2
        mask = r2 < 1.0
        # blended: full strength at the centre, fading to zero at the rim,
        # so the trace has no sharp edge a detector could key on
        weight = np.where(mask, 1.0 - r2, 0.0) if spec.trace_profile == "blended" else mask.astype(np.float64)
        field = amp * weight[..., None] * np.asarray(spec.trace_tint)
        return field, mask
    side = max(2, int(round(math.sqrt(frac) * size)))
    y0, x0 = rng.integers(0, size - side + 1, size=2)
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y0 + side, x0:x0 + side] = True
    if spec.trace_kind == "ripple":
        period = 4.0
        wave = np.sin(2 * np.pi * (xx - x0 + 0.5) / period + np.pi / 4) * np.sin(2 * np.pi * (yy - y0 + 0.5) / period + np.pi / 4)
        field = amp * (mask * wave)[..., None] * np.ones(3)
        return field, mask
    if spec.trace_kind == "channel_offset":
        field = amp * mask[..., None] * np.array([1.0, 0.0, -1.0])
        return field, mask
    raise ValueError(f"unknown trace kind {spec.trace_kind!r}")


def inject_trace(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Add a localized forgery trace to ``image`` and clamp to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    field, _ = trace_field(spec, image.shape[0], rng)
    return np.clip(image + field, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8)


# -- benchmark layout --------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    relative_path: str
    label: int
    domain_id: int
    split: str

    @property
    def sample_id(self) -> str:
        return Path(self.relative_path).stem


@dataclass
class Manifest:
    records: list[SampleRecord]
    config: BenchmarkConfig | None = None
    stats: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            MANIFEST_MAGIC,
            "# config: " + json.dumps(self.config.to_dict() if self.config else None, sort_keys=True),
            f"# seed: {self.config.seed if self.config else None}",
            "# stats: " + json.dumps(self.stats, sort_keys=True),
            "\t".join(RECORD_FIELDS),
        ]
        lines += [f"{r.relative_path}\t{r.label}\t{r.domain_id}\t{r.split}" for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def plan_records(config: BenchmarkConfig) -> list[tuple[int, SampleRecord]]:
    """Deterministic (global_index, record) list for a config."""
    out = []
    n = config.images_per_domain_per_class
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    index = 0
    for spec in config.domains:
        for label in (0, 1):
            kind = "fake" if label else "real"
            for j in range(n):
                if spec.domain_id in config.holdout_domain_ids:
                    split = "test"
                else:
                    keep = spec.train_fake_fraction if label else spec.train_real_fraction
                    n_keep = max(1, int(round(keep * n_train)))
                    split = "train" if j < n_keep else ("val" if j < n_train + n_val else "test")
                rel = f"d{spec.domain_id:02d}/{kind}/d{spec.domain_id:02d}_{kind}_{j:05d}.png"
                out.append((index, SampleRecord(rel, label, spec.domain_id, split)))
                index += 1
    return out


def render_sample(config: BenchmarkConfig, index: int, record: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(clean, final)`` float images for one planned sample.

    ``clean`` is the image before any trace, ``final`` is what gets written.
    Both depend only on ``(config.seed, index)``.
    """
    spec = next(d for d in config.domains if d.domain_id == record.domain_id)
    clean = render_clean(spec, config.image_size, _sample_rng(config.seed, index, 0))
    if record.label == 1:
        final = inject_trace(clean, spec, _sample_rng(config.seed, index, 1))
    else:
        final = clean
    return clean, final


def mean_pairwise_distance(a: np.ndarray, b: np.ndarray | None = None) -> float:
    """Mean L2 distance over all pairs (rows of ``a`` x rows of ``b``).

    With ``b`` omitted, averages over unordered distinct pairs within ``a``.
    """
    a = a.reshape(len(a), -1).astype(np.float64)
    same = b is None
    b = a if same else b.reshape(len(b), -1).astype(np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    d = np.sqrt(np.maximum(sq, 0.0))
    if same:
        iu = np.triu_indices(len(a), k=1)
        return float(d[iu].mean())
    return float(d.mean())


def dominance_stats(images: np.ndarray, labels: np.ndarray, domains: np.ndarray, trace_norms: np.ndarray) -> dict:
    """Domain-dominance statistics over float images in [0, 1].

    ``trace_norms`` holds the L2 norm of (fake - clean twin) for every fake.
    """
    ids = sorted(set(domains.tolist()))
    inter_sum, inter_n = 0.0, 0
    rf_sum, rf_n = 0.0, 0
    for i, da in enumerate(ids):
        A = images[domains == da]
        for db in ids[i + 1:]:
            B = images[domains == db]
            inter_sum += mean_pairwise_distance(A, B) * len(A) * len(B)
            inter_n += len(A) * len(B)
        real = images[(domains == da) & (labels == 0)]
        fake = images[(domains == da) & (labels == 1)]
        rf_sum += mean_pairwise_distance(real, fake) * len(real) * len(fake)
        rf_n += len(real) * len(fake)
    inter = inter_sum / inter_n if inter_n else 0.0
    rf = rf_sum / rf_n
    trace = float(np.mean(trace_norms)) if len(trace_norms) else 0.0
    return {
        "inter_domain_distance": inter,
        "within_domain_real_fake_distance": rf,
        "dominance_factor": inter / rf if rf > 0 else math.inf,
        "trace_energy": trace,
        "trace_to_domain_ratio": trace / inter if inter > 0 else math.inf,
    }


def generate_benchmark(config: BenchmarkConfig, out_dir: str | Path) -> Manifest:
    """Render every sample to PNG under ``out_dir`` and write ``manifest.txt``."""
    config.check()
    out_dir = Path(out_dir)
    plan = plan_records(config)
    images, labels, domains, trace_norms = [], [], [], []
    for index, rec in plan:
        clean, final = render_sample(config, index, rec)
        q = to_uint8(final)
        path = out_dir / rec.relative_path
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(q, mode="RGB").save(path, format="PNG", optimize=False)
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        f = q.astype(np.float64) / 255.0
        images.append(f)
        labels.append(rec.label)
        domains.append(rec.domain_id)
        if rec.label == 1:
            c = to_uint8(clean).astype(np.float64) / 255.0
            trace_norms.append(float(np.linalg.norm(f - c)))
    stats = dominance_stats(np.stack(images), np.array(labels), np.array(domains), np.array(trace_norms))
    manifest = Manifest([r for _, r in plan], config, stats)
    manifest.write(out_dir / "manifest.txt")
    return manifest


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ValueError(f"{path}: not a devdet manifest")
    header = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition(": ")
        header[key] = value
        i += 1
    if i >= len(lines) or lines[i] != "\t".join(RECORD_FIELDS):
        raise ValueError(f"{path}: missing column header line")
    records = []
    for lineno, line in enumerate(lines[i + 1:], start=i + 2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        rel, label, dom, split = parts
        sid = Path(rel).stem
        try:
            label_i, dom_i = int(label), int(dom)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: sample {sid}: non-integer label/domain") from None
        if label_i not in (0, 1):
            raise ValueError(f"{path}:{lineno}: sample {sid}: label must be 0 or 1, got {label_i}")
        if split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: sample {sid}: unknown split {split!r}")
        records.append(SampleRecord(rel, label_i, dom_i, split))
    cfg = json.loads(header.get("config", "null"))
    config = BenchmarkConfig.from_dict(cfg) if cfg else None
    stats = json.loads(header.get("stats", "{}"))
    return Manifest(records, config, stats)
