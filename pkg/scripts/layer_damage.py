"""Where does the feature attack do its damage? Per-block cosine and norms.

Compares the residual stream of clean and PGD-attacked images after each
block, on the token-free backbone and with trained tokens (if given).

    python scripts/layer_damage.py [--tokens runs/default/rob/tokens.ckpt]
"""

import argparse

import numpy as np

from robtok import checkpoint as ck
from robtok.attacks import AttackConfig, pgd_feature_attack
from robtok.autodiff import Tensor
from robtok.data import PretrainConfig, SyntheticDatasetSpec, generate_dataset, pretrain_backbone
from robtok.vit import ViTConfig, embed, forward


def stream(model, images, rob=None):
    seq = embed(model, images, rob)
    lo, hi = seq.feature_range
    _, stats = forward(model, seq, keep_activations=True)
    return [a[:, lo:hi] for a in stats.activations]


def row_cos(a, b):
    num = (a * b).sum(-1)
    return float(np.mean(num / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + 1e-12)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", help="backbone checkpoint; pretrains the default one if omitted")
    ap.add_argument("--tokens")
    ap.add_argument("--n", type=int, default=32)
    args = ap.parse_args()

    ds = generate_dataset(SyntheticDatasetSpec())
    if args.model:
        model = ck.model_from_checkpoint(ck.load_checkpoint(args.model))
    else:
        model = pretrain_backbone(ViTConfig(), ds.split("train"), PretrainConfig())
    x = ds.split("eval").images[: args.n]
    adv = pgd_feature_attack(model, x, AttackConfig()).images
    variants = {"no tokens": None}
    if args.tokens:
        variants["tokens"] = Tensor(ck.tokens_from_checkpoint(ck.load_checkpoint(args.tokens)))
    for name, rob in variants.items():
        clean, attacked = stream(model, x), stream(model, adv, rob)
        print(f"{name} (layer 0 = embedding)")
        for i, (c, a) in enumerate(zip(clean, attacked)):
            print(f"  layer {i}: cos {row_cos(c, a):.3f}  |clean| {np.linalg.norm(c, axis=-1).mean():6.2f}  |adv| {np.linalg.norm(a, axis=-1).mean():6.2f}")


if __name__ == "__main__":
    main()
