"""Procedural shapes dataset and supervised pretraining of the toy backbone."""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Adam
from .vit import ModelWeights, ViTConfig, classify, features

log = logging.getLogger(__name__)

SHAPES = ("circle", "stripes", "cross", "triangle")
HUE_BANDS = 4
SPLITS = ("train", "probe", "eval")


class DatasetConfigError(ValueError):
    pass


class PretrainingFailed(RuntimeError):
    def __init__(self, accuracy: float, floor: float, model: ModelWeights):
        super().__init__(f"backbone probe accuracy {accuracy:.1f}% is below the {floor:.1f}% floor")
        self.accuracy = accuracy
        self.floor = floor
        self.model = model


@dataclass
class SyntheticDatasetSpec:
    n_images: int = 2400
    image_size: int = 32
    n_classes: int = 8
    seed: int = 7
    split_fractions: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6)
    noise_std: float = 0.004
    contrast: tuple[float, float] = (0.15, 0.3)

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.contrast = tuple(float(c) for c in self.contrast)
        if self.n_classes < 1 or self.n_classes > len(SHAPES) * HUE_BANDS:
            raise DatasetConfigError(
                f"{self.n_classes} classes requested, only {len(SHAPES) * HUE_BANDS} shape/hue combinations exist"
            )
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DatasetConfigError("split_fractions must be three values summing to 1")
        if min(self.split_fractions) < 0:
            raise DatasetConfigError("split_fractions must be non-negative")


@dataclass
class LabeledBatch:
    images: np.ndarray  # (N, 3, H, W) on the 8-bit grid
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.images[idx], self.labels[idx])


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    images: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]

    def split(self, name: str) -> LabeledBatch:
        idx = self.splits[name]
        return LabeledBatch(self.images[idx], self.labels[idx])


def class_family(label: int) -> tuple[str, int]:
    """(shape, hue band) for a class; hue varies fastest."""
    return SHAPES[label // HUE_BANDS], label % HUE_BANDS


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "circle":
        return u * u + v * v < 1.0
    if shape == "stripes":
        return (np.maximum(np.abs(u), np.abs(v)) < 0.85) & (np.mod(np.floor(u * 2.5), 2) == 0)
    if shape == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            inside &= u * np.cos(ang) + v * np.sin(ang) < 0.5
        return inside
    if shape == "cross":
        return ((np.abs(u) < 0.3) & (np.abs(v) < 1.0)) | ((np.abs(v) < 0.3) & (np.abs(u) < 1.0))
    raise DatasetConfigError(f"unknown shape {shape!r}")


def render_image(
    label: int,
    size: int,
    rng: np.random.Generator,
    noise_std: float = 0.004,
    contrast: tuple[float, float] = (0.15, 0.3),
) -> np.ndarray:
    """One (3, size, size) image of the class's shape/hue family."""
    shape, band = class_family(label)
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    scale = rng.uniform(0.45, 0.75)
    cx, cy = rng.uniform(-0.95 + scale, 0.95 - scale, size=2)
    theta = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    mask = _shape_mask(shape, c * dx + s * dy, -s * dx + c * dy)

    hue = (band + rng.uniform(0.15, 0.85)) / HUE_BANDS
    fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)))
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.1, 0.5)))
    alpha = rng.uniform(*contrast)
    img = np.where(mask[None], (bg + alpha * (fg - bg))[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def generate_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """Render a class-balanced dataset; deterministic in ``spec.seed``."""
    n, k = spec.n_images, spec.n_classes
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(n) % k)
    images = np.empty((n, 3, spec.image_size, spec.image_size))
    for i in range(n):
        images[i] = render_image(
            int(labels[i]), spec.image_size, np.random.default_rng([spec.seed, i]), spec.noise_std, spec.contrast
        )
    n_train = int(round(n * spec.split_fractions[0]))
    n_probe = int(round(n * spec.split_fractions[1]))
    n_probe = min(n_probe, n - n_train)
    order = np.arange(n)
    splits = {
        "train": order[:n_train],
        "probe": order[n_train : n_train + n_probe],
        "eval": order[n_train + n_probe :],
    }
    return SyntheticDataset(spec, images, labels, splits)


@dataclass
class PretrainConfig:
    epochs: int = 25
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    min_probe_accuracy: float = 80.0


def pretrain_backbone(config: ViTConfig, data: LabeledBatch, cfg: PretrainConfig | None = None) -> ModelWeights:
    """Supervised cross-entropy training; returns the frozen backbone without its head.

    Raises :class:`PretrainingFailed` if a linear probe on the class feature
    cannot reach ``cfg.min_probe_accuracy`` on the training images.
    """
    from .evaluation import ProbeConfig, fit_logistic, probe_accuracy

    cfg = cfg or PretrainConfig()
    model = ModelWeights.init(config, seed=cfg.seed, with_head=True)
    model.set_trainable(True)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = ad.cross_entropy(classify(model, data.images[idx]), data.labels[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        log.info("pretrain epoch %d loss %.4f", epoch, total / n)
    backbone = model.strip_head().freeze()
    feats = extract_class_features(backbone, data.images)
    head = fit_logistic(feats, data.labels, config.num_classes, ProbeConfig())
    acc = probe_accuracy(head, feats, data.labels)
    log.info("pretrain probe accuracy %.2f%%", acc)
    if acc < cfg.min_probe_accuracy:
        raise PretrainingFailed(acc, cfg.min_probe_accuracy, backbone)
    return backbone


def extract_class_features(model: ModelWeights, images: np.ndarray, rob: np.ndarray | None = None, batch_size: int = 128) -> np.ndarray:
    rob_t = None if rob is None else Tensor(rob)
    out = []
    for start in range(0, len(images), batch_size):
        out.append(features(model, images[start : start + batch_size], rob_t).class_feature.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.dim))
