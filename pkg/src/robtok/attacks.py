"""White-box attacks on the token-free backbone.

None of the attacks here accept robustness tokens: adversaries are always a
function of the public model only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import FeatureSet, ModelWeights, feature_cosine, features

PSNR_INF = math.inf

FeatureFn = Callable[[Tensor], FeatureSet]
Model = Union[ModelWeights, FeatureFn]


@dataclass
class AttackConfig:
    steps: int = 30
    eps_inf: float = 8 / 255
    step_size: float | None = None
    quantize: bool = True
    min_psnr_db: float = 40.0
    mse_weight: float = 1.0
    mse_reduction: str = "sum"
    init_scale: float = 0.25
    psnr_projection: bool = True
    psnr_margin_db: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = self.eps_inf / 10
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 < self.eps_inf <= 1:
            raise ValueError("eps_inf must lie in (0, 1]")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 <= self.init_scale <= 1:
            raise ValueError("init_scale must lie in [0, 1]")


@dataclass
class AdversarialExample:
    """A batch of attacked images with per-sample fidelity."""

    images: np.ndarray
    psnr_db: np.ndarray
    loss_trace: np.ndarray  # (steps, N)
    psnr_ok: np.ndarray
    kind: str = "pgd"
    meta: dict = field(default_factory=dict)


# every attack call is recorded here so evaluations can audit the threat model
CALL_LOG: list[dict] = []


def _log_call(kind: str, model, n: int) -> None:
    CALL_LOG.append({"kind": kind, "model": id(model), "n": n, "tokens": False})


def extract(model: Model, x: Tensor) -> FeatureSet:
    if isinstance(model, ModelWeights):
        return features(model, x)
    return model(x)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB with peak 1.0; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ad.DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / err)


def batch_psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([psnr(x, y) for x, y in zip(a, b)])


def quantize(x: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid k/255, halves rounded up."""
    return np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5) / 255.0


def attack_loss(model: Model, x_clean, x_adv: Tensor, cfg: AttackConfig, clean_features: FeatureSet | None = None) -> Tensor:
    """Per-sample feature cosine plus weighted image distortion, shape (N,).

    The attacker minimizes this: features are pushed apart while the
    distortion term keeps the image close to the original.
    """
    if clean_features is None:
        clean_features = extract(model, Tensor(np.asarray(x_clean))).detach()
    cos = feature_cosine(clean_features, extract(model, x_adv))
    if cfg.mse_weight == 0:
        return cos
    n = x_adv.shape[0]
    diff = ad.sub(x_adv, np.asarray(x_clean))
    sq = ad.reshape(ad.mul(diff, diff), (n, -1))
    dist = ad.sum_(sq, axis=1) if cfg.mse_reduction == "sum" else ad.mean(sq, axis=1)
    return ad.add(cos, ad.mul_scalar(dist, cfg.mse_weight))


def _finish(x_clean: np.ndarray, x_adv: np.ndarray, cfg: AttackConfig, trace, kind: str) -> AdversarialExample:
    if cfg.quantize:
        x_adv = quantize(x_adv)
        if cfg.psnr_projection:
            x_adv = _repair_fidelity(x_clean, x_adv, cfg.min_psnr_db)
    p = batch_psnr(x_clean, x_adv)
    trace = np.array(trace).reshape(len(trace), x_clean.shape[0])
    return AdversarialExample(x_adv, p, trace, p >= cfg.min_psnr_db, kind)


def _project(x_clean: np.ndarray, x_adv: np.ndarray, eps: float, max_mse: float | None = None) -> np.ndarray:
    x_adv = np.clip(np.clip(x_adv, x_clean - eps, x_clean + eps), 0.0, 1.0)
    if max_mse is None:
        return x_adv
    delta = x_adv - x_clean
    err = np.mean(delta.reshape(len(delta), -1) ** 2, axis=1)
    scale = np.sqrt(np.minimum(1.0, max_mse / np.maximum(err, 1e-300)))
    return x_clean + delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def _repair_fidelity(x_clean: np.ndarray, x_q: np.ndarray, floor_db: float, shrink: float = 0.95) -> np.ndarray:
    """Shrink quantized perturbations until each sample's PSNR clears ``floor_db``."""
    out = x_q.copy()
    for i in range(len(out)):
        delta = x_q[i] - x_clean[i]
        s = 1.0
        while psnr(x_clean[i], out[i]) < floor_db:
            s *= shrink
            out[i] = quantize(x_clean[i] + s * delta)
    return out


def _max_mse(cfg: AttackConfig) -> float | None:
    if not cfg.psnr_projection:
        return None
    return 10.0 ** (-(cfg.min_psnr_db + cfg.psnr_margin_db) / 10.0)


def _start(x_clean: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.init_scale == 0:
        return x_clean.copy()
    rng = np.random.default_rng(cfg.seed)
    r = cfg.init_scale * cfg.eps_inf
    return _project(x_clean, x_clean + rng.uniform(-r, r, size=x_clean.shape), cfg.eps_inf, _max_mse(cfg))


def _signed_descent(loss_fn, x_clean: np.ndarray, cfg: AttackConfig, direction: float, kind: str):
    x_adv = _start(x_clean, cfg) if cfg.steps else x_clean.copy()
    trace = []
    for _ in range(cfg.steps):
        xt = Tensor(x_adv, requires_grad=True)
        per_sample = loss_fn(xt)
        ad.backward(ad.sum_(per_sample))
        trace.append(per_sample.data.copy())
        if xt.grad is not None:
            x_adv = x_adv + direction * cfg.step_size * np.sign(xt.grad)
        x_adv = _project(x_clean, x_adv, cfg.eps_inf, _max_mse(cfg))
    return _finish(x_clean, x_adv, cfg, trace, kind)


def pgd_feature_attack(model: Model, x_clean, cfg: AttackConfig | None = None) -> AdversarialExample:
    """Signed-gradient descent on :func:`attack_loss` inside the L-inf ball."""
    cfg = cfg or AttackConfig()
    x_clean = np.asarray(x_clean, dtype=np.float64)
    _log_call("pgd_feature", model, x_clean.shape[0])
    ref = extract(model, Tensor(x_clean)).detach()
    return _signed_descent(lambda xt: attack_loss(model, x_clean, xt, cfg, ref), x_clean, cfg, -1.0, "pgd")


def fgsm_feature_attack(model: Model, x_clean, cfg: AttackConfig | None = None) -> AdversarialExample:
    """One full-budget signed step of the feature objective."""
    cfg = cfg or AttackConfig()
    one = replace(cfg, steps=1, step_size=cfg.eps_inf)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    _log_call("fgsm_feature", model, x_clean.shape[0])
    ref = extract(model, Tensor(x_clean)).detach()
    adv = _signed_descent(lambda xt: attack_loss(model, x_clean, xt, one, ref), x_clean, one, -1.0, "fgsm")
    adv.psnr_ok = adv.psnr_db >= cfg.min_psnr_db
    return adv


def pgd_task_attack(model: ModelWeights, head, x_clean, y, cfg: AttackConfig | None = None) -> AdversarialExample:
    """Signed-gradient ascent on cross-entropy of a linear head over the class feature."""
    cfg = cfg or AttackConfig()
    x_clean = np.asarray(x_clean, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    k = head.weight.shape[1]
    if y.shape != (x_clean.shape[0],) or (y.size and (y.min() < 0 or y.max() >= k)):
        raise ad.ContractError(f"labels must be {x_clean.shape[0]} indices in [0, {k})")
    _log_call("pgd_task", model, x_clean.shape[0])
    w, b = Tensor(head.weight), Tensor(head.bias)

    def loss_fn(xt):
        logits = ad.add(ad.matmul(extract(model, xt).class_feature, w), b)
        return ad.cross_entropy(logits, y, reduction="none")

    return _signed_descent(loss_fn, x_clean, cfg, +1.0, "pgd_task")


ATTACKS = {
    "pgd": pgd_feature_attack,
    "fgsm": fgsm_feature_attack,
}
