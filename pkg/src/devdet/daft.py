"""Stage 2: dose-adaptive fine-tuning and three-step inference."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import file_hash, load_checkpoint, parameter_hash, save_checkpoint
from .data import SampleSet, batches
from .detector import NumericalError, TrainConfig, bce_from_logits, predict_batch, train_detector
from .dosedict import DoseDictModel, adaptive_doses
from .ffdev import Stage1Config, apply_developer, generate_developer, tv_loss

log = logging.getLogger(__name__)

BUNDLE_FILES = {
    "detector": "detector.ckpt",
    "generator": "generator.ckpt",
    "extractor": "extractor.ckpt",
    "dictionary": "dosedict.bin",
}


@dataclass
class PipelineModel:
    detector: nn.Module
    generator: nn.Module
    dictionary: DoseDictModel | None
    extractor: nn.Module
    base_dose: float = 0.25
    dose_mode: str = "adaptive"  # "adaptive" | "fixed"

    def doses(self, images: np.ndarray) -> np.ndarray:
        """Per-image dose, from frozen pretrained features."""
        if self.dose_mode == "fixed":
            return np.full(len(images), float(self.base_dose))
        if self.dictionary is None:
            raise ValueError("adaptive dosing needs a fitted dictionary")
        _, feats = predict_batch(self.extractor, images)
        return adaptive_doses(self.dictionary, feats, self.base_dose)


def develop(pipeline: PipelineModel, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Steps 1 and 2 of inference: dose, then developed images."""
    doses = pipeline.doses(images)
    delta = generate_developer(pipeline.generator, images)
    return apply_developer(images, delta, doses), doses


def infer_batch(pipeline: PipelineModel, images: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(confidences, doses, developed images) for N x 3 x H x W images."""
    images = np.asarray(images, dtype=np.float32)
    developed, doses = develop(pipeline, images)
    conf, _ = predict_batch(pipeline.detector, developed)
    return conf, doses, developed


def infer(pipeline: PipelineModel, image: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Confidence, dose used and developed image for one H x W x 3 image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    conf, doses, developed = infer_batch(pipeline, image.transpose(2, 0, 1)[None])
    return float(conf[0]), float(doses[0]), developed[0].transpose(1, 2, 0)


def _frozen_hashes(pipeline: PipelineModel) -> tuple[str, str, bytes | None]:
    d = pipeline.dictionary.D.tobytes() if pipeline.dictionary is not None else None
    return parameter_hash(pipeline.generator), parameter_hash(pipeline.extractor), d


def finetune(pipeline: PipelineModel, train: SampleSet, config: TrainConfig) -> PipelineModel:
    """Fine-tune the detector on developed images; generator, dictionary and
    feature extractor stay fixed. The dose of each training image comes from
    ``pipeline.doses`` (adaptive or fixed)."""
    if pipeline.generator is None or pipeline.extractor is None:
        raise ValueError("fine-tuning needs the stage-1 generator and the pretrained extractor")
    if pipeline.dose_mode == "adaptive" and pipeline.dictionary is None:
        raise ValueError("adaptive fine-tuning needs a fitted dictionary")
    before = _frozen_hashes(pipeline)
    dtype = next(pipeline.detector.parameters()).dtype
    # The dose depends only on the frozen extractor and dictionary, so it is
    # computed once per training sample (on the stored image) and reused in
    # every epoch; the developer itself sees the augmented batch.
    dose_of = dict(zip(train.ids, pipeline.doses(train.images())))

    def transform(batch, x):
        doses = np.array([dose_of[s.sample_id] for s in batch.samples])
        delta = generate_developer(pipeline.generator, batch.images)
        return torch.as_tensor(apply_developer(batch.images, delta, doses)).to(dtype)

    detector, history = train_detector(pipeline.detector, train, config, transform, stage="daft")
    if _frozen_hashes(pipeline) != before:
        raise RuntimeError("frozen pipeline parts changed during fine-tuning")
    out = replace(pipeline, detector=detector)
    out.loss_history = history
    return out


def finetune_parallel(
    pipeline: PipelineModel,
    train: SampleSet,
    config: TrainConfig,
    stage1: Stage1Config,
) -> PipelineModel:
    """Joint variant: generator and detector optimized together on the
    whole training set with the pipeline's dosing."""
    gen = copy.deepcopy(pipeline.generator)
    det = copy.deepcopy(pipeline.detector)
    params = list(gen.parameters()) + list(det.parameters())
    for p in params:
        p.requires_grad_(True)
    gen.train()
    det.train()
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    dtype = next(det.parameters()).dtype
    history = []
    dose_of = dict(zip(train.ids, pipeline.doses(train.images())))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(config.epochs):
            total, count = 0.0, 0
            for batch in batches(train, config.batch_size, config.seed, epoch, augment_images=config.augment):
                x = torch.as_tensor(batch.images).to(dtype)
                doses = torch.as_tensor([dose_of[s.sample_id] for s in batch.samples], dtype=dtype)
                developed = apply_developer(x, gen(x), doses)
                logits, _ = det(developed)
                loss = bce_from_logits(logits, torch.as_tensor(batch.labels))
                loss = loss + stage1.lambda_tv * tv_loss(developed, stage1.tv_smoothing_eps) / len(batch)
                if not torch.isfinite(loss):
                    raise NumericalError(f"parallel fine-tuning: non-finite loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                count += len(batch)
            history.append(total / count)
    for m in (gen, det):
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    out = replace(pipeline, detector=det, generator=gen)
    out.loss_history = history
    return out


# -- bundle I/O ----------------------------------------------------------------


def save_bundle(pipeline: PipelineModel, out_dir: str | Path, **meta) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pipeline.detector, out_dir / BUNDLE_FILES["detector"], **meta)
    save_checkpoint(pipeline.generator, out_dir / BUNDLE_FILES["generator"], **meta)
    save_checkpoint(pipeline.extractor, out_dir / BUNDLE_FILES["extractor"], **meta)
    files = dict(BUNDLE_FILES)
    if pipeline.dictionary is not None:
        pipeline.dictionary.save(out_dir / BUNDLE_FILES["dictionary"])
    else:
        files.pop("dictionary")
    index = {
        "base_dose": pipeline.base_dose,
        "dose_mode": pipeline.dose_mode,
        "files": files,
        "hashes": {k: file_hash(out_dir / f) for k, f in files.items()},
        "meta": meta,
    }
    (out_dir / "bundle.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out_dir


class BundleError(ValueError):
    pass


def load_bundle(path: str | Path) -> tuple[PipelineModel, dict]:
    path = Path(path)
    index_path = path / "bundle.json"
    if not index_path.exists():
        raise BundleError(f"{path}: no bundle.json")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    for key, fname in index["files"].items():
        f = path / fname
        if not f.exists():
            raise BundleError(f"{path}: missing {fname}")
        if file_hash(f) != index["hashes"][key]:
            raise BundleError(f"{path}: hash mismatch for {fname}")
    detector, _ = load_checkpoint(path / index["files"]["detector"])
    generator, _ = load_checkpoint(path / index["files"]["generator"])
    extractor, _ = load_checkpoint(path / index["files"]["extractor"])
    dictionary = None
    if "dictionary" in index["files"]:
        dictionary = DoseDictModel.load(path / index["files"]["dictionary"])
    for m in (detector, generator, extractor):
        for p in m.parameters():
            p.requires_grad_(False)
    pipeline = PipelineModel(detector, generator, dictionary, extractor, index["base_dose"], index["dose_mode"])
    return pipeline, index["meta"]
