"""Binary real/fake detector: reference backbone, inference, training."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import register
from .data import SampleSet, batches

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
EVAL_CHUNK = 256


class NumericalError(RuntimeError):
    pass


@register("convdet-v1")
class ConvDetector(nn.Module):
    """Four conv blocks (each halves resolution), global average pool,
    one hidden dense layer and a scalar logit.

    ``forward`` returns ``(logit, feature)``; the feature is the hidden
    activation after pooling.
    """

    def __init__(self, widths=(16, 32, 32, 64), hidden: int = 32, in_channels: int = 3):
        super().__init__()
        self.arch = {"widths": list(widths), "hidden": hidden, "in_channels": in_channels}
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU(), nn.Conv2d(w, w, 3, stride=2, padding=1), nn.ReLU()]
            c = w
        self.body = nn.Sequential(*layers)
        self.hidden = nn.Linear(c, hidden)
        self.head = nn.Linear(hidden, 1)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.head.weight, std=0.01)

    @property
    def feature_dim(self) -> int:
        return self.hidden.out_features

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(2.0 * x - 1.0).mean(dim=(2, 3))
        z = F.relu(self.hidden(h))
        return self.head(z).squeeze(-1), z


def make_detector(seed: int = 0, **arch) -> ConvDetector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConvDetector(**arch)
    model.eval()
    return model


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    augment: bool = True

    def validate(self) -> list[str]:
        errs = []
        if not self.learning_rate > 0:
            errs.append("learning_rate must be > 0")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        return errs


def _as_tensor(images: np.ndarray, model: nn.Module) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.ascontiguousarray(images)).to(dtype)


def predict_batch(model: nn.Module, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Confidences and features for N x 3 x H x W images.

    Evaluated in fixed chunks of ``EVAL_CHUNK`` so the result for a given
    image list does not depend on the caller.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W images, got shape {images.shape}")
    confs, feats = [], []
    with torch.no_grad():
        for start in range(0, len(images), EVAL_CHUNK):
            logit, z = model(_as_tensor(images[start:start + EVAL_CHUNK], model))
            confs.append(torch.sigmoid(logit).double().numpy())
            feats.append(z.double().numpy())
    if not confs:
        return np.zeros(0), np.zeros((0, model.feature_dim))
    return np.concatenate(confs), np.concatenate(feats)


def predict(model: nn.Module, image: np.ndarray) -> tuple[float, np.ndarray]:
    """Fake-confidence in (0, 1) and feature vector for one H x W x 3 image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    conf, feat = predict_batch(model, image.transpose(2, 0, 1)[None])
    return float(conf[0]), feat[0]


def score_set(model: nn.Module, sset: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    return predict_batch(model, sset.images())


def bce_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, evaluated on logits for stability."""
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def train_detector(
    model: nn.Module,
    train: SampleSet,
    config: TrainConfig,
    transform=None,
    stage: str = "pretrain",
) -> tuple[nn.Module, list[float]]:
    """Adam/BCE training loop shared by pretraining and fine-tuning.

    ``transform(batch, images_tensor)`` may rewrite the inputs (used to
    apply the developer during fine-tuning). Returns a trained copy and the
    per-epoch mean losses.
    """
    model = copy.deepcopy(model)
    model.train()
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS)
    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(config.epochs):
            total, count = 0.0, 0
            for batch in batches(train, config.batch_size, config.seed, epoch, augment_images=config.augment):
                x = _as_tensor(batch.images, model)
                if transform is not None:
                    x = transform(batch, x)
                y = torch.as_tensor(batch.labels)
                logits, _ = model(x)
                loss = bce_from_logits(logits, y)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"{stage}: non-finite loss at epoch {epoch}; "
                        f"try a learning rate below {config.learning_rate:g}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                count += len(batch)
            history.append(total / count)
            log.info("%s epoch %d loss %.5f", stage, epoch, history[-1])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history


def pretrain(model: nn.Module, train: SampleSet, config: TrainConfig) -> nn.Module:
    """Train the detector on the multi-domain training set."""
    labels = set(train.labels.tolist())
    if len(train) == 0 or labels != {0, 1}:
        raise ValueError("pretraining needs a nonempty set containing both classes")
    trained, history = train_detector(model, train, config)
    trained.loss_history = history
    return trained


# -- gradient checking ---------------------------------------------------------


def developing_loss_torch(conf: torch.Tensor, labels: torch.Tensor, clamp: float = 1e-7) -> torch.Tensor:
    p = conf.clamp(clamp, 1 - clamp)
    y = labels.to(conf.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def parameter_gradients(model: nn.Module, images: np.ndarray, labels: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Autograd gradient of ``scale`` x mean cross-entropy, flattened."""
    params = list(model.parameters())
    x = _as_tensor(images, model)
    logit, _ = model(x)
    loss = scale * developing_loss_torch(torch.sigmoid(logit), torch.as_tensor(labels))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return np.concatenate([
        (g if g is not None else torch.zeros_like(p)).detach().double().reshape(-1).numpy()
        for g, p in zip(grads, params)
    ])


def numeric_gradients(loss_fn, params: list[torch.Tensor], step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` w.r.t. every parameter entry."""
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + step
                up = float(loss_fn())
                flat[i] = old - step
                down = float(loss_fn())
                flat[i] = old
                g[i] = (up - down) / (2 * step)
            out.append(g)
    return np.concatenate(out)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(model: nn.Module, images: np.ndarray, labels: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between autograd and finite-difference gradients
    of the mean cross-entropy loss, computed in float64 on a copy."""
    model = copy.deepcopy(model).double()
    analytic = parameter_gradients(model, images, labels)
    x = _as_tensor(images, model)
    y = torch.as_tensor(labels)

    def loss_fn():
        logit, _ = model(x)
        return developing_loss_torch(torch.sigmoid(logit), y)

    numeric = numeric_gradients(loss_fn, list(model.parameters()), step)
    return float(relative_error(analytic, numeric).max())


def config_dict(config) -> dict:
    return asdict(config)


def accuracy(conf: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    pred = (conf >= threshold).astype(int)
    return float((pred == labels).mean()) if len(labels) else math.nan
