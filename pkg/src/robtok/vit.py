"""A small pre-norm Vision Transformer with an injection point for extra tokens."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-6


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_registers: int = 0
    num_classes: int = 8

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.num_registers < 0 or self.depth < 0:
            raise ValueError("num_registers and depth must be non-negative")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class ModelWeights:
    """Named parameter tensors of the backbone plus its config."""

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0, with_head: bool = True) -> "ModelWeights":
        rng = np.random.default_rng(seed)
        d, hid = config.dim, config.dim * config.mlp_ratio

        def normal(*shape, std=0.02):
            return rng.normal(0.0, std, size=shape)

        raw: dict[str, np.ndarray] = {
            "patch_embed.weight": normal(config.patch_dim, d),
            "patch_embed.bias": np.zeros(d),
            "pos_embed": normal(1 + config.num_patches, d),
            "cls_token": normal(1, d),
            "registers": normal(config.num_registers, d),
        }
        for i in range(config.depth):
            p = f"blocks.{i}."
            raw[p + "ln1.gamma"] = np.ones(d)
            raw[p + "ln1.beta"] = np.zeros(d)
            raw[p + "attn.qkv.weight"] = normal(d, 3 * d)
            raw[p + "attn.qkv.bias"] = np.zeros(3 * d)
            raw[p + "attn.proj.weight"] = normal(d, d)
            raw[p + "attn.proj.bias"] = np.zeros(d)
            raw[p + "ln2.gamma"] = np.ones(d)
            raw[p + "ln2.beta"] = np.zeros(d)
            raw[p + "mlp.fc1.weight"] = normal(d, hid)
            raw[p + "mlp.fc1.bias"] = np.zeros(hid)
            raw[p + "mlp.fc2.weight"] = normal(hid, d)
            raw[p + "mlp.fc2.bias"] = np.zeros(d)
        raw["norm.gamma"] = np.ones(d)
        raw["norm.beta"] = np.zeros(d)
        if with_head:
            raw["head.weight"] = normal(d, config.num_classes)
            raw["head.bias"] = np.zeros(config.num_classes)
        return cls(config, {k: Tensor(v) for k, v in raw.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def has_head(self) -> bool:
        return "head.weight" in self.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def freeze(self) -> "ModelWeights":
        self.set_trainable(False)
        return self

    def strip_head(self) -> "ModelWeights":
        params = {k: v for k, v in self.params.items() if not k.startswith("head.")}
        return ModelWeights(self.config, params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_state_dict(cls, config: ViTConfig, state: dict[str, np.ndarray]) -> "ModelWeights":
        return cls(config, {k: Tensor(np.array(v, dtype=np.float64)) for k, v in state.items()})


@dataclass
class TokenSequence:
    """Tokens (N, T, D) plus index ranges for each slot family."""

    tokens: Tensor
    layout: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        spans = sorted(self.layout.values())
        pos = 0
        for start, stop in spans:
            if start != pos or stop < start:
                raise ValueError(f"layout {self.layout} is not a disjoint cover")
            pos = stop
        if pos != self.tokens.shape[1]:
            raise ValueError(f"layout covers {pos} tokens but sequence has {self.tokens.shape[1]}")

    @property
    def feature_range(self) -> tuple[int, int]:
        """Contiguous class+patch span."""
        return self.layout["cls"][0], self.layout["patches"][1]


@dataclass
class FeatureSet:
    class_feature: Tensor  # (N, D)
    patch_features: Tensor  # (N, P, D)

    def stacked(self) -> Tensor:
        """(N, 1 + P, D) with the class token first."""
        c = self.class_feature
        return ad.concat([ad.reshape(c, (c.shape[0], 1, c.shape[1])), self.patch_features], axis=1)

    def detach(self) -> "FeatureSet":
        return FeatureSet(self.class_feature.detach(), self.patch_features.detach())


@dataclass
class ActivationStats:
    """max |activation| over class and patch slots: (N, depth + 1)."""

    max_abs: np.ndarray
    activations: list[np.ndarray] | None = None


def patchify(images, config: ViTConfig) -> Tensor:
    """(N, C, H, W) -> (N, P, p*p*C), row-major patches, channel-last within a patch."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1:] != (config.channels, config.image_size, config.image_size):
        raise ad.DimensionError(
            f"expected images (N, {config.channels}, {config.image_size}, {config.image_size}), got {x.shape}"
        )
    n, c, s, p = x.shape[0], config.channels, config.image_size, config.patch_size
    g = s // p
    x = ad.reshape(x, (n, c, g, p, g, p))
    x = ad.transpose(x, (0, 2, 4, 3, 5, 1))
    return ad.reshape(x, (n, g * g, p * p * c))


def unpatchify(patches: np.ndarray, config: ViTConfig) -> np.ndarray:
    n, c, s, p = patches.shape[0], config.channels, config.image_size, config.patch_size
    g = s // p
    x = patches.reshape(n, g, g, p, p, c)
    return x.transpose(0, 5, 1, 3, 2, 4).reshape(n, c, s, s)


def embed(model: ModelWeights, images, rob: Tensor | None = None) -> TokenSequence:
    """Build [rob | cls | registers | patches + pos] for a batch of images."""
    cfg = model.config
    patches = patchify(images, cfg)
    n = patches.shape[0]
    d = cfg.dim
    x = ad.add(ad.matmul(patches, model["patch_embed.weight"]), model["patch_embed.bias"])
    pos = model["pos_embed"]
    cls = ad.add(model["cls_token"], ad.slice_(pos, 0, 0, 1))
    x = ad.add(x, ad.slice_(pos, 0, 1, 1 + cfg.num_patches))
    parts = []
    layout = {}
    t = 0
    if rob is not None:
        if rob.ndim != 2 or rob.shape[1] != d:
            raise ad.DimensionError(f"robustness tokens have shape {rob.shape}, expected (R, {d})")
        parts.append(ad.expand(rob, (n, rob.shape[0], d)))
        layout["rob"] = (t, t + rob.shape[0])
        t += rob.shape[0]
    parts.append(ad.expand(cls, (n, 1, d)))
    layout["cls"] = (t, t + 1)
    t += 1
    if cfg.num_registers:
        parts.append(ad.expand(model["registers"], (n, cfg.num_registers, d)))
    layout["registers"] = (t, t + cfg.num_registers)
    t += cfg.num_registers
    parts.append(x)
    layout["patches"] = (t, t + cfg.num_patches)
    return TokenSequence(ad.concat(parts, axis=1), layout)


def _attention(model: ModelWeights, prefix: str, h: Tensor, heads: int) -> Tensor:
    n, t, d = h.shape
    dh = d // heads
    qkv = ad.add(ad.matmul(h, model[prefix + "qkv.weight"]), model[prefix + "qkv.bias"])
    qkv = ad.transpose(ad.reshape(qkv, (n, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q = ad.reshape(ad.slice_(qkv, 0, 0, 1), (n, heads, t, dh))
    k = ad.reshape(ad.slice_(qkv, 0, 1, 2), (n, heads, t, dh))
    v = ad.reshape(ad.slice_(qkv, 0, 2, 3), (n, heads, t, dh))
    scores = ad.mul_scalar(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    out = ad.matmul(ad.softmax(scores, axis=-1), v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (n, t, d))
    return ad.add(ad.matmul(out, model[prefix + "proj.weight"]), model[prefix + "proj.bias"])


def _block(model: ModelWeights, i: int, x: Tensor) -> Tensor:
    p = f"blocks.{i}."
    h = ad.layer_norm(x, model[p + "ln1.gamma"], model[p + "ln1.beta"], LN_EPS)
    x = ad.add(x, _attention(model, p + "attn.", h, model.config.heads))
    h = ad.layer_norm(x, model[p + "ln2.gamma"], model[p + "ln2.beta"], LN_EPS)
    h = ad.gelu(ad.add(ad.matmul(h, model[p + "mlp.fc1.weight"]), model[p + "mlp.fc1.bias"]))
    h = ad.add(ad.matmul(h, model[p + "mlp.fc2.weight"]), model[p + "mlp.fc2.bias"])
    return ad.add(x, h)


def forward(model: ModelWeights, seq: TokenSequence, keep_activations: bool = False):
    """Run all blocks and the final norm. Returns (output sequence, ActivationStats)."""
    lo, hi = seq.feature_range
    x = seq.tokens
    acts = [x.data]
    for i in range(model.config.depth):
        x = _block(model, i, x)
        acts.append(x.data)
    out = ad.layer_norm(x, model["norm.gamma"], model["norm.beta"], LN_EPS)
    max_abs = np.stack([np.abs(a[:, lo:hi]).max(axis=(1, 2)) for a in acts], axis=1)
    stats = ActivationStats(max_abs, acts if keep_activations else None)
    return TokenSequence(out, dict(seq.layout)), stats


def features(model: ModelWeights, images, rob: Tensor | None = None) -> FeatureSet:
    seq = embed(model, images, rob)
    out, _ = forward(model, seq)
    c0, _ = out.layout["cls"]
    p0, p1 = out.layout["patches"]
    n, _, d = out.tokens.shape
    cls = ad.reshape(ad.slice_(out.tokens, 1, c0, c0 + 1), (n, d))
    return FeatureSet(cls, ad.slice_(out.tokens, 1, p0, p1))


def feature_cosine(fa: FeatureSet, fb: FeatureSet, mode: str = "token_mean") -> Tensor:
    """Per-sample similarity of two feature sets, shape (N,).

    ``token_mean`` averages the per-token cosine over the 1 + P tokens;
    ``flat`` takes one cosine over the flattened token matrix.
    """
    a, b = fa.stacked(), fb.stacked()
    if a.shape != b.shape:
        raise ad.DimensionError(f"feature shapes {a.shape} and {b.shape} differ")
    if mode == "token_mean":
        return ad.mean(ad.row_cosine(a, b), axis=1)
    if mode == "flat":
        n = a.shape[0]
        return ad.row_cosine(ad.reshape(a, (n, -1)), ad.reshape(b, (n, -1)))
    raise ValueError(f"unknown cosine mode {mode!r}")


def classify(model: ModelWeights, images, rob: Tensor | None = None) -> Tensor:
    """Logits from the pretraining head on the class feature."""
    f = features(model, images, rob)
    return ad.add(ad.matmul(f.class_feature, model["head.weight"]), model["head.bias"])


def config_dict(config: ViTConfig) -> dict:
    return dataclasses.asdict(config)
