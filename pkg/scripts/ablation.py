"""Token-count ablation: final loss per R next to the no-token baseline.

    python scripts/ablation.py --counts 1,10,20,50 --out runs/ablation.json
"""

import argparse
import logging

from robtok.attacks import AttackConfig
from robtok.data import PretrainConfig, SyntheticDatasetSpec, generate_dataset, pretrain_backbone
from robtok.evaluation import ablate_token_count, dump_json
from robtok.training import TrainConfig
from robtok.vit import ViTConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--counts", default="1,10,20,50")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--out", default="ablation.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = generate_dataset(SyntheticDatasetSpec())
    model = pretrain_backbone(ViTConfig(), ds.split("train"), PretrainConfig())
    counts = [int(c) for c in args.counts.split(",")]
    res = ablate_token_count(model, ds.split("train").images, counts, TrainConfig(max_steps=args.steps, record_wall_time=False), AttackConfig())
    for c in res.counts:
        print(f"R={c:3d}  final loss {res.final_loss[c]:.4f}")
    print(f"no tokens  {res.baseline_final:.4f}")
    dump_json(res.to_dict(), args.out)


if __name__ == "__main__":
    main()
