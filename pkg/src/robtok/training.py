"""Training secret robustness tokens against a frozen backbone."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd_feature_attack
from .autodiff import Tensor
from .optim import AdamState, adam_update
from .vit import FeatureSet, ModelWeights, feature_cosine, features

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "loss", "loss_inv", "loss_adv", "grad_count", "wall_ms")
MAX_PSNR_RETRIES = 3


class FrozenWeightsViolation(RuntimeError):
    """A backbone tensor received a gradient or changed during token training."""


@dataclass
class RobTokens:
    tokens: np.ndarray  # (R, D)

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def init(cls, count: int, dim: int, seed: int = 0, std: float = 0.02) -> "RobTokens":
        rng = np.random.default_rng([seed, 0])
        return cls(rng.normal(0.0, std, size=(count, dim)))

    def tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.tokens.copy(), requires_grad=requires_grad)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 400
    dataset_size: int = 1600
    seed: int = 0
    adv_weight: float = 1.0
    init_std: float = 0.02
    record_wall_time: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.max_steps < 0 or self.dataset_size < 1:
            raise ValueError("batch_size, max_steps and dataset_size must be positive")


@dataclass
class TrainRecord:
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    loss_inv: list[float] = field(default_factory=list)
    loss_adv: list[float] = field(default_factory=list)
    grad_count: list[int] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    # token-free cosine of each step's adversaries, i.e. L_adv with no tokens
    baseline_adv: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.step)

    def append(self, **row) -> None:
        for k, v in row.items():
            getattr(self, k).append(v)

    def window_mean(self, column: str, end: int, window: int = 20) -> float:
        """Mean of ``column`` over the ``window`` steps ending at step index ``end`` (exclusive)."""
        vals = getattr(self, column)[max(0, end - window) : end]
        return float(np.mean(vals))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for i in range(len(self)):
                w.writerow(
                    [
                        self.step[i],
                        repr(self.loss[i]),
                        repr(self.loss_inv[i]),
                        repr(self.loss_adv[i]),
                        self.grad_count[i],
                        f"{self.wall_ms[i]:.3f}",
                    ]
                )


def _mean_cosine(model: ModelWeights, r: Tensor, images: np.ndarray, ref: FeatureSet) -> Tensor:
    return ad.mean(feature_cosine(ref, features(model, images, r)))


def loss_inv(model: ModelWeights, r: Tensor, batch: np.ndarray, ref: FeatureSet | None = None) -> Tensor:
    """Mean cosine between token-bearing and token-free features of clean images."""
    ref = features(model, batch).detach() if ref is None else ref
    return _mean_cosine(model, r, batch, ref)


def loss_adv(model: ModelWeights, r: Tensor, batch: np.ndarray, adv_batch: np.ndarray, ref: FeatureSet | None = None) -> Tensor:
    """Mean cosine between token-bearing adversarial features and token-free clean features."""
    if len(adv_batch) != len(batch):
        raise ad.DimensionError(f"{len(adv_batch)} adversaries for {len(batch)} clean images")
    ref = features(model, batch).detach() if ref is None else ref
    return _mean_cosine(model, r, adv_batch, ref)


def total_loss(model, r, batch, adv_batch, adv_weight: float = 1.0):
    """(L, L_inv, L_adv) with L = L_inv + adv_weight * L_adv, to be maximized.

    Both branches run in a single forward pass over the stacked batch.
    """
    if len(adv_batch) != len(batch):
        raise ad.DimensionError(f"{len(adv_batch)} adversaries for {len(batch)} clean images")
    n = len(batch)
    ref = features(model, batch).detach()
    both = features(model, np.concatenate([batch, adv_batch], axis=0), r)
    ref2 = FeatureSet(
        Tensor(np.concatenate([ref.class_feature.data] * 2)),
        Tensor(np.concatenate([ref.patch_features.data] * 2)),
    )
    cos = feature_cosine(ref2, both)
    l_inv = ad.mean(ad.slice_(cos, 0, 0, n))
    l_adv = ad.mean(ad.slice_(cos, 0, n, 2 * n))
    return ad.add(l_inv, ad.mul_scalar(l_adv, adv_weight)), l_inv, l_adv, ref


def craft_adversaries(model: ModelWeights, batch: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """PGD adversaries; samples under the PSNR floor are retried at half the step size."""
    adv = pgd_feature_attack(model, batch, cfg)
    images = adv.images.copy()
    bad = np.flatnonzero(~adv.psnr_ok)
    step = cfg.step_size
    for _ in range(MAX_PSNR_RETRIES):
        if bad.size == 0:
            break
        step /= 2
        retry = pgd_feature_attack(model, batch[bad], replace(cfg, step_size=step))
        images[bad[retry.psnr_ok]] = retry.images[retry.psnr_ok]
        bad = bad[~retry.psnr_ok]
    images[bad] = batch[bad]
    return images


def check_frozen(model: ModelWeights) -> None:
    for name, p in model.params.items():
        if p.requires_grad or (p.grad is not None and np.any(p.grad)):
            raise FrozenWeightsViolation(f"backbone tensor {name!r} is receiving gradients")


def train_step(
    model: ModelWeights,
    rob: RobTokens,
    adam: AdamState,
    batch: np.ndarray,
    attack_cfg: AttackConfig,
    train_cfg: TrainConfig,
    step: int = 0,
    count_base: int = 0,
):
    """One optimizer step on the tokens. Returns (tokens, adam state, record row)."""
    t0 = time.perf_counter()
    adv_batch = craft_adversaries(model, batch, replace(attack_cfg, seed=_attack_seed(train_cfg.seed, step)))
    r = rob.tensor(requires_grad=True)
    total, l_inv, l_adv, ref = total_loss(model, r, batch, adv_batch, train_cfg.adv_weight)
    ad.backward(ad.mul_scalar(total, -1.0))
    check_frozen(model)
    grad = np.zeros_like(rob.tokens) if r.grad is None else r.grad
    new_tokens, adam = adam_update(
        rob.tokens, grad, adam, train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps
    )
    base_adv = float(np.mean(feature_cosine(ref, features(model, adv_batch)).data))
    wall = (time.perf_counter() - t0) * 1000.0 if train_cfg.record_wall_time else 0.0
    row = dict(
        step=step,
        loss=total.item(),
        loss_inv=l_inv.item(),
        loss_adv=l_adv.item(),
        grad_count=ad.grad_count() - count_base,
        wall_ms=wall,
        baseline_adv=base_adv,
    )
    return RobTokens(new_tokens), adam, row


def _attack_seed(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, 2, step]).integers(2**31))


def train_loop(
    model: ModelWeights,
    images: np.ndarray,
    train_cfg: TrainConfig | None = None,
    attack_cfg: AttackConfig | None = None,
    num_tokens: int = 10,
    callback=None,
) -> tuple[RobTokens, TrainRecord]:
    """Train ``num_tokens`` tokens on the first ``dataset_size`` images."""
    train_cfg = train_cfg or TrainConfig()
    attack_cfg = attack_cfg or AttackConfig()
    model.freeze()
    before = model.snapshot()
    data = images[: train_cfg.dataset_size]
    n = len(data)
    rob = RobTokens.init(num_tokens, model.config.dim, train_cfg.seed, train_cfg.init_std)
    adam = AdamState.zeros_like(rob.tokens)
    record = TrainRecord()
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    per_epoch = max(1, n // train_cfg.batch_size)
    base = ad.grad_count()
    order = None
    for step in range(train_cfg.max_steps):
        if step % per_epoch == 0:
            order = order_rng.permutation(n)
        k = step % per_epoch
        batch = data[order[k * train_cfg.batch_size : (k + 1) * train_cfg.batch_size]]
        rob, adam, row = train_step(model, rob, adam, batch, attack_cfg, train_cfg, step, base)
        record.append(**row)
        if callback is not None:
            callback(row)
        if step % 20 == 0:
            log.info("step %d L=%.4f inv=%.4f adv=%.4f", step, row["loss"], row["loss_inv"], row["loss_adv"])
    after = model.snapshot()
    for name, arr in before.items():
        if not np.array_equal(arr, after[name]):
            raise FrozenWeightsViolation(f"backbone tensor {name!r} changed during token training")
    return rob, record
