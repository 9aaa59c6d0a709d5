"""Stage 1: the developer generator and its training loop.

The generator maps an image to an additive perturbation in [-1, 1]. Added
at a small dose, it should push hard fakes towards the fake side of the
frozen detector while leaving easy reals where they are.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import parameter_hash, register
from .data import SampleSet, batches
from .detector import NumericalError, bce_from_logits, numeric_gradients, relative_error

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@register("devgen-v1")
class DevGenerator(nn.Module):
    """Encoder-decoder with skip connections: three stride-2 downsampling
    blocks, three upsampling blocks, tanh output."""

    def __init__(self, width: int = 16, in_channels: int = 3):
        super().__init__()
        self.arch = {"width": width, "in_channels": in_channels}
        w = width
        self.stem = nn.Conv2d(in_channels, w, 3, padding=1)
        self.down = nn.ModuleList([
            nn.Conv2d(w, w, 3, stride=2, padding=1),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1),
        ])
        self.up = nn.ModuleList([
            nn.Conv2d(2 * w + 2 * w, 2 * w, 3, padding=1),
            nn.Conv2d(2 * w + w, w, 3, padding=1),
            nn.Conv2d(w + w, w, 3, padding=1),
        ])
        self.out = nn.Conv2d(w, in_channels, 3, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.out.weight, std=1e-3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.stem(2.0 * x - 1.0))
        skips = [h]
        for conv in self.down:
            h = F.relu(conv(h))
            skips.append(h)
        skips.pop()
        for conv in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = F.relu(conv(torch.cat([h, skip], dim=1)))
        return torch.tanh(self.out(h))


def make_generator(seed: int = 0, **arch) -> DevGenerator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = DevGenerator(**arch)
    gen.eval()
    return gen


@dataclass
class Stage1Config:
    dose_epsilon: float = 0.25
    lambda_tv: float = 1e-4
    tv_smoothing_eps: float = 1e-8
    learning_rate: float = 2e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    augment: bool = True

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 < self.dose_epsilon <= 1.0:
            errs.append("dose_epsilon must be in (0, 1]")
        if self.lambda_tv < 0:
            errs.append("lambda_tv must be >= 0")
        if self.tv_smoothing_eps < 0:
            errs.append("tv_smoothing_eps must be >= 0")
        if not self.learning_rate > 0:
            errs.append("stage1 learning_rate must be > 0")
        if self.epochs < 0:
            errs.append("stage1 epochs must be >= 0")
        if self.batch_size < 1:
            errs.append("stage1 batch_size must be >= 1")
        return errs


# -- developer arithmetic ------------------------------------------------------


def apply_developer(image, delta, dose):
    """Developed image ``clip(image + dose * delta, 0, 1)``.

    Works on numpy arrays and torch tensors. ``dose`` may be a scalar or a
    per-image vector (broadcast over the leading axis of a batch).
    """
    if tuple(image.shape) != tuple(delta.shape):
        raise ValueError(f"image shape {tuple(image.shape)} != developer shape {tuple(delta.shape)}")
    if isinstance(image, torch.Tensor):
        d = torch.as_tensor(dose, dtype=image.dtype)
        if d.ndim == 1:
            d = d.view(-1, *([1] * (image.ndim - 1)))
        if (d < 0).any():
            raise ValueError("dose must be >= 0")
        return torch.clamp(image + d * delta, 0.0, 1.0)
    d = np.asarray(dose, dtype=np.float64)
    if d.ndim == 1:
        d = d.reshape(-1, *([1] * (np.ndim(image) - 1)))
    if (d < 0).any():
        raise ValueError("dose must be >= 0")
    out = np.clip(image + d * delta, 0.0, 1.0)
    return out.astype(np.result_type(image), copy=False)


def developing_loss(confidence: float, label: int) -> float:
    """Binary cross-entropy of one fake-confidence against its label."""
    p = min(max(float(confidence), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(label * math.log(p) + (1 - label) * math.log(1.0 - p))


def tv_loss(image, eps: float = 1e-8):
    """Smoothed isotropic total variation, summed over pixels and channels.

    ``image`` is ``(..., C, H, W)`` (numpy or torch). Forward differences
    along rows and columns; the difference past the last row/column is 0.
    """
    if image.shape[-1] < 2 or image.shape[-2] < 2:
        raise ValueError("total variation needs at least a 2 x 2 image")
    if isinstance(image, torch.Tensor):
        dr = F.pad(image[..., 1:, :] - image[..., :-1, :], (0, 0, 0, 1))
        dc = F.pad(image[..., :, 1:] - image[..., :, :-1], (0, 1, 0, 0))
        return torch.sqrt(dr * dr + dc * dc + eps).sum()
    image = np.asarray(image, dtype=np.float64)
    dr = np.zeros_like(image)
    dc = np.zeros_like(image)
    dr[..., :-1, :] = image[..., 1:, :] - image[..., :-1, :]
    dc[..., :, :-1] = image[..., :, 1:] - image[..., :, :-1]
    return float(np.sqrt(dr * dr + dc * dc + eps).sum())


def stage1_loss(gen: nn.Module, detector: nn.Module, x: torch.Tensor, y: torch.Tensor, config: Stage1Config) -> torch.Tensor:
    """Cross-entropy of the frozen detector on developed images plus
    ``lambda_tv`` times the per-image TV of the developed images."""
    delta = gen(x)
    developed = apply_developer(x, delta, config.dose_epsilon)
    logits, _ = detector(developed)
    dev = bce_from_logits(logits, y)
    tv = tv_loss(developed, config.tv_smoothing_eps) / x.shape[0]
    return dev + config.lambda_tv * tv


class Stage1Error(NumericalError):
    def __init__(self, message: str, last_good: nn.Module):
        super().__init__(message)
        self.last_good = last_good


def train_stage1(gen: nn.Module, detector: nn.Module, s1: SampleSet, config: Stage1Config) -> nn.Module:
    """Optimize the generator only; the detector stays frozen.

    The trained copy carries ``loss_history`` (per-epoch mean stage-1 loss).
    """
    if len(s1) == 0:
        raise ValueError("stage-1 set is empty")
    before = parameter_hash(detector)
    detector.eval()
    frozen_flags = [p.requires_grad for p in detector.parameters()]
    for p in detector.parameters():
        p.requires_grad_(False)
    gen = copy.deepcopy(gen)
    gen.train()
    for p in gen.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(gen.parameters(), lr=config.learning_rate)
    history = []
    last_good = copy.deepcopy(gen)
    dtype = next(gen.parameters()).dtype
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            for epoch in range(config.epochs):
                total, count = 0.0, 0
                for batch in batches(s1, config.batch_size, config.seed, epoch, augment_images=config.augment):
                    x = torch.as_tensor(batch.images).to(dtype)
                    y = torch.as_tensor(batch.labels)
                    loss = stage1_loss(gen, detector, x, y, config)
                    if not torch.isfinite(loss):
                        raise Stage1Error(f"stage 1: non-finite loss at epoch {epoch}", last_good)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    total += float(loss.detach()) * len(batch)
                    count += len(batch)
                history.append(total / count)
                last_good = copy.deepcopy(gen)
                log.info("stage1 epoch %d loss %.5f", epoch, history[-1])
    finally:
        for p, flag in zip(detector.parameters(), frozen_flags):
            p.requires_grad_(flag)
    if parameter_hash(detector) != before:
        raise RuntimeError("detector parameters changed during stage 1")
    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    gen.loss_history = history
    return gen


def generate_developer(gen: nn.Module, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Developer arrays for N x 3 x H x W images."""
    out = []
    dtype = next(gen.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            x = torch.as_tensor(np.ascontiguousarray(images[start:start + chunk])).to(dtype)
            out.append(gen(x).numpy())
    return np.concatenate(out) if out else np.zeros_like(images)


def stage1_gradient_check(
    gen: nn.Module,
    detector: nn.Module,
    images: np.ndarray,
    labels: np.ndarray,
    config: Stage1Config,
    step: float = 1e-5,
) -> float:
    """Max relative error of autograd vs central differences for the
    stage-1 loss w.r.t. generator parameters (float64 copies)."""
    gen = copy.deepcopy(gen).double()
    detector = copy.deepcopy(detector).double()
    for p in detector.parameters():
        p.requires_grad_(False)
    x = torch.as_tensor(images, dtype=torch.float64)
    y = torch.as_tensor(labels)
    params = list(gen.parameters())
    for p in params:
        p.requires_grad_(True)
    loss = stage1_loss(gen, detector, x, y, config)
    grads = torch.autograd.grad(loss, params)
    analytic = np.concatenate([g.detach().reshape(-1).numpy() for g in grads])
    numeric = numeric_gradients(lambda: stage1_loss(gen, detector, x, y, config), params, step)
    return float(relative_error(analytic, numeric).max())
