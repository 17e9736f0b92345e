"""Linear probes and the robustness evaluation harness.

Every adversary produced here comes from the token-free backbone; tokens are
only ever used on the defender's inference pass.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks as atk
from .attacks import AttackConfig
from .autodiff import ContractError, Tensor
from .training import RobTokens, TrainConfig, TrainRecord, train_loop
from .vit import ModelWeights, embed, feature_cosine, features, forward

ABLATION_COUNTS = (1, 10, 20, 50)


@dataclass
class ProbeConfig:
    max_iter: int = 2000
    tol: float = 1e-6
    l2: float = 1e-4


@dataclass
class ProbeHead:
    weight: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weight + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(feats), axis=1)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(feats: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeConfig | None = None) -> ProbeHead:
    """Multinomial logistic regression by full-batch gradient descent.

    The step size is 1/L with L the smoothness constant of the loss.
    """
    cfg = cfg or ProbeConfig()
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    n, d = feats.shape
    xb = np.hstack([feats, np.ones((n, 1))])
    onehot = np.eye(n_classes)[labels]
    lr = 1.0 / (0.5 * np.linalg.eigvalsh(xb.T @ xb / n)[-1] + cfg.l2)
    w = np.zeros((d + 1, n_classes))
    prev = np.inf
    for _ in range(cfg.max_iter):
        p = _softmax_rows(xb @ w)
        loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300)) + 0.5 * cfg.l2 * np.sum(w[:-1] ** 2)
        if abs(prev - loss) < cfg.tol:
            break
        prev = loss
        grad = xb.T @ (p - onehot) / n
        grad[:-1] += cfg.l2 * w[:-1]
        w -= lr * grad
    return ProbeHead(w[:-1].copy(), w[-1].copy())


def probe_accuracy(head: ProbeHead, feats: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return 100.0 * float(np.mean(head.predict(feats) == np.asarray(labels)))


def class_features(model: ModelWeights, images: np.ndarray, rob: RobTokens | None = None, batch_size: int = 128) -> np.ndarray:
    r = None if rob is None else Tensor(rob.tokens)
    out = [features(model, images[i : i + batch_size], r).class_feature.data for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.dim))


def train_linear_probe(
    model: ModelWeights,
    rob: RobTokens | None,
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int | None = None,
    cfg: ProbeConfig | None = None,
) -> ProbeHead:
    """Fit a linear head on frozen class features, with or without tokens."""
    k = n_classes or model.config.num_classes
    return fit_logistic(class_features(model, images, rob), labels, k, cfg)


@dataclass
class EvalReport:
    clean_accuracy: float
    adv_accuracy: float
    feature_robustness: float
    n_samples: int
    attack: str
    tokens_used: bool

    def to_dict(self) -> dict:
        return asdict(self)


def craft(model: ModelWeights, images: np.ndarray, labels: np.ndarray, kind: str, cfg: AttackConfig, attack_head: ProbeHead | None = None, batch_size: int = 8) -> np.ndarray:
    """Adversaries for ``images`` from the token-free model, batch by batch."""
    mark = len(atk.CALL_LOG)
    out = []
    for b, i in enumerate(range(0, len(images), batch_size)):
        bcfg = replace(cfg, seed=int(np.random.default_rng([cfg.seed, 3, b]).integers(2**31)))
        x = images[i : i + batch_size]
        if kind == "pgd":
            adv = atk.pgd_feature_attack(model, x, bcfg)
        elif kind == "fgsm":
            adv = atk.fgsm_feature_attack(model, x, bcfg)
        elif kind == "pgd_task":
            if attack_head is None:
                raise ValueError("pgd_task needs an attack head")
            adv = atk.pgd_task_attack(model, attack_head, x, labels[i : i + batch_size], bcfg)
        else:
            raise ValueError(f"unknown attack {kind!r}")
        out.append(adv.images)
    audit_calls(atk.CALL_LOG[mark:], model)
    return np.concatenate(out) if out else images.copy()


def audit_calls(calls: list[dict], model: ModelWeights) -> None:
    """Every attack call must target the public model and carry no tokens."""
    for c in calls:
        if c["tokens"] or c["model"] != id(model):
            raise ContractError(f"attack call {c} violates the secret-token threat model")


def evaluate(
    model: ModelWeights,
    rob: RobTokens | None,
    head: ProbeHead,
    images: np.ndarray,
    labels: np.ndarray,
    attack: str | None = None,
    attack_cfg: AttackConfig | None = None,
    attack_head: ProbeHead | None = None,
    adversaries: np.ndarray | None = None,
) -> EvalReport:
    """Clean/adversarial accuracy and feature robustness.

    ``feature_robustness`` compares token-free clean features with the
    (optionally token-bearing) features of the attacked images.
    ``adversaries`` may be passed in to reuse images crafted for another
    evaluation; they must come from the token-free model.
    """
    cfg = attack_cfg or AttackConfig()
    clean_acc = probe_accuracy(head, class_features(model, images, rob), labels)
    if attack is None:
        adv = images
    elif adversaries is not None:
        adv = adversaries
    else:
        adv = craft(model, images, labels, attack, cfg, attack_head or head)
    adv_acc = probe_accuracy(head, class_features(model, adv, rob), labels) if attack else clean_acc
    r = None if rob is None else Tensor(rob.tokens)
    cos = []
    for i in range(0, len(images), 64):
        ref = features(model, images[i : i + 64])
        cos.append(feature_cosine(ref, features(model, adv[i : i + 64], r)).data)
    robustness = float(np.mean(np.concatenate(cos))) if cos else float("nan")
    return EvalReport(clean_acc, adv_acc, robustness, int(len(images)), attack or "none", rob is not None)


def generalization_eval(
    model: ModelWeights,
    rob: RobTokens,
    images: np.ndarray,
    labels: np.ndarray,
    head_plain: ProbeHead,
    head_rob: ProbeHead,
    attack_cfg: AttackConfig | None = None,
    kind: str = "fgsm",
) -> tuple[EvalReport, EvalReport]:
    """(baseline, robustified) reports under a held-out attack family."""
    cfg = attack_cfg or AttackConfig()
    adv = craft(model, images, labels, kind, cfg)
    base = evaluate(model, None, head_plain, images, labels, kind, cfg, adversaries=adv)
    robust = evaluate(model, rob, head_rob, images, labels, kind, cfg, adversaries=adv)
    return base, robust


def trailing_cosine_summary(record: TrainRecord, window: int = 100) -> tuple[float, float]:
    """Mean and sample standard deviation of L_adv over the last ``window`` steps."""
    if len(record) < window or window < 2:
        raise ContractError(f"record has {len(record)} steps, need at least {max(window, 2)}")
    # exact rational arithmetic: a constant series gives a std of exactly 0
    tail = [float(v) for v in record.loss_adv[-window:]]
    return statistics.mean(tail), statistics.stdev(tail)


@dataclass
class AblationResult:
    counts: list[int]
    final_loss: dict[int, float]
    curves: dict[int, list[float]]
    baseline_final: float
    baseline_curve: list[float] = field(default_factory=list)
    window: int = 20

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.counts, self.counts[1:])):
            raise ValueError("token counts must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "counts": list(self.counts),
            "final_loss": {str(k): v for k, v in self.final_loss.items()},
            "baseline_final": self.baseline_final,
            "window": self.window,
        }


def ablate_token_count(
    model: ModelWeights,
    images: np.ndarray,
    counts=ABLATION_COUNTS,
    train_cfg: TrainConfig | None = None,
    attack_cfg: AttackConfig | None = None,
    window: int = 20,
    records: dict[int, TrainRecord] | None = None,
) -> AblationResult:
    """Train one token set per count on identical data and adversaries.

    ``records`` supplies already-finished runs (same configs) to skip.
    Final losses are means over the last ``window`` steps; the no-token
    baseline is evaluated on exactly the same batches and adversaries.
    """
    counts = sorted(int(c) for c in counts)
    done = dict(records or {})
    for c in counts:
        if c not in done:
            done[c] = train_loop(model, images, train_cfg, attack_cfg, c)[1]
    curves = {c: list(done[c].loss) for c in counts}
    final = {c: done[c].window_mean("loss", len(done[c]), window) for c in counts}
    ref = done[counts[0]]
    base_curve = [1.0 + b for b in ref.baseline_adv]
    base_final = float(np.mean(base_curve[-window:])) if base_curve else float("nan")
    return AblationResult(counts, final, curves, base_final, base_curve, window)


@dataclass
class ActivationReport:
    clean_plain: np.ndarray
    adv_plain: np.ndarray
    clean_rob: np.ndarray
    adv_rob: np.ndarray

    COLUMNS = ("layer", "clean_no_tokens", "adv_no_tokens", "clean_tokens", "adv_tokens")

    def __post_init__(self):
        n = len(self.clean_plain)
        if not all(len(s) == n for s in (self.adv_plain, self.clean_rob, self.adv_rob)):
            raise ValueError("activation series must have equal length")

    def gap(self, with_tokens: bool) -> float:
        """Sum over layers of |max_adv - max_clean|."""
        if with_tokens:
            return float(np.sum(np.abs(self.adv_rob - self.clean_rob)))
        return float(np.sum(np.abs(self.adv_plain - self.clean_plain)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for i in range(len(self.clean_plain)):
                w.writerow([i] + [repr(float(s[i])) for s in (self.clean_plain, self.adv_plain, self.clean_rob, self.adv_rob)])


def activation_stats(model: ModelWeights, image: np.ndarray, rob: RobTokens | None = None, keep: bool = False):
    r = None if rob is None else Tensor(rob.tokens)
    _, stats = forward(model, embed(model, image, r), keep_activations=keep)
    return stats


def massive_activation_report(model: ModelWeights, rob: RobTokens | None, image: np.ndarray, attack_cfg: AttackConfig | None = None) -> ActivationReport:
    """Per-layer max |activation| for clean/adversarial inputs, with and without tokens."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ValueError("massive_activation_report takes a single image")
    adv = atk.pgd_feature_attack(model, image, attack_cfg or AttackConfig()).images
    series = [activation_stats(model, x, t).max_abs[0] for t in (None, rob) for x in (image, adv)]
    return ActivationReport(series[0], series[1], series[2], series[3])


def dump_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
