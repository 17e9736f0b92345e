"""Clean / PGD / FGSM table for one backbone, with and without trained tokens.

    python scripts/defense_table.py --out runs/table.json --n-eval 160
"""

import argparse
import logging
import time

from robtok.attacks import AttackConfig
from robtok.data import PretrainConfig, SyntheticDatasetSpec, generate_dataset, pretrain_backbone
from robtok.evaluation import craft, dump_json, evaluate, train_linear_probe
from robtok.training import TrainConfig, train_loop
from robtok.vit import ViTConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="defense_table.json")
    ap.add_argument("--n-eval", type=int, default=160)
    ap.add_argument("--num-tokens", type=int, default=10)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    ds = generate_dataset(SyntheticDatasetSpec())
    model = pretrain_backbone(ViTConfig(), ds.split("train"), PretrainConfig(seed=args.seed))
    rob, rec = train_loop(
        model, ds.split("train").images, TrainConfig(max_steps=args.steps, seed=args.seed, record_wall_time=False),
        AttackConfig(seed=args.seed), args.num_tokens,
    )
    probe, ev = ds.split("probe"), ds.split("eval")[: args.n_eval]
    heads = {False: train_linear_probe(model, None, probe.images, probe.labels),
             True: train_linear_probe(model, rob, probe.images, probe.labels)}

    rows = {}
    for kind in ("pgd", "fgsm"):
        adv = craft(model, ev.images, ev.labels, kind, AttackConfig(seed=args.seed))
        for with_tokens in (False, True):
            rep = evaluate(model, rob if with_tokens else None, heads[with_tokens], ev.images, ev.labels, kind, adversaries=adv)
            rows[f"{kind}/{'tokens' if with_tokens else 'baseline'}"] = rep.to_dict()
            print(f"{kind:5s} tokens={with_tokens!s:5s} clean {rep.clean_accuracy:5.1f}  adv {rep.adv_accuracy:5.1f}  cos {rep.feature_robustness:.3f}")
    dump_json({"reports": rows, "final_loss": rec.window_mean("loss", len(rec)), "seconds": time.perf_counter() - t0}, args.out)


if __name__ == "__main__":
    main()
