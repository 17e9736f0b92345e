"""Command-line entry point: ``robtok <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 qualification or contract failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import checkpoint as ck
from .autodiff import ContractError, DegenerateInputError, DimensionError
from .config import RunConfig, apply_overrides, override_flags
from .data import PretrainingFailed, generate_dataset, pretrain_backbone
from .evaluation import (
    ABLATION_COUNTS,
    ablate_token_count,
    craft,
    dump_json,
    evaluate,
    generalization_eval,
    massive_activation_report,
    train_linear_probe,
)
from .training import FrozenWeightsViolation, RobTokens, train_loop

log = logging.getLogger("robtok")

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3
RESOLVED = "resolved_config.json"
TRACE_COLUMNS_HEAD = ("step", "mean_loss")

REPORT_FIELDS = {
    "clean_accuracy": float,
    "adv_accuracy": float,
    "feature_robustness": float,
    "n_samples": int,
    "attack": str,
    "tokens_used": bool,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, needs_model: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="run seed (pretraining, token init, data order, attack starts)")
    p.add_argument("--out", required=True, help="output path")
    p.add_argument("--threads", type=int, help="cap on BLAS threads (fallback: ROBTOK_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    if needs_model:
        p.add_argument("--model", required=True, help="backbone checkpoint")
    g = p.add_argument_group("config overrides")
    for flag, sec, name, _ in override_flags():
        g.add_argument(flag, dest=f"ov:{sec}:{name}", metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robtok", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="render the dataset and pretrain a backbone")
    _add_common(p, needs_model=False)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-rob", help="train robustness tokens on a frozen backbone")
    _add_common(p)
    p.add_argument("--num-tokens", type=int)

    p = sub.add_parser("attack", help="craft adversaries and write them as PNGs")
    _add_common(p)
    p.add_argument("--attack", choices=("pgd", "fgsm", "pgd_task"), default="pgd")
    p.add_argument("--split", choices=("train", "probe", "eval"), default="eval")
    p.add_argument("--n-images", type=int, default=16)

    p = sub.add_parser("eval", help="linear-probe accuracy and feature robustness")
    _add_common(p)
    p.add_argument("--tokens", help="robustness token checkpoint")
    p.add_argument("--eval", dest="mode", choices=("standard", "generalization"), default="standard")
    p.add_argument("--attack", choices=("pgd", "fgsm", "pgd_task", "none"), default="pgd")
    p.add_argument("--n-images", type=int, help="limit the number of evaluation images")

    p = sub.add_parser("ablate", help="token-count ablation")
    _add_common(p)
    p.add_argument("--counts", default=",".join(map(str, ABLATION_COUNTS)))

    p = sub.add_parser("probe-activations", help="per-layer max |activation| series")
    _add_common(p)
    p.add_argument("--tokens", help="robustness token checkpoint (omit for R=0)")
    p.add_argument("--image-index", type=int, default=0)
    return parser


def resolve_config(args) -> RunConfig:
    try:
        return _resolve(args)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.apply_seed()
    if getattr(args, "epochs", None) is not None:
        cfg.pretrain.epochs = args.epochs
    if getattr(args, "num_tokens", None) is not None:
        cfg.num_tokens = args.num_tokens
    if args.threads is not None:
        cfg.threads = args.threads
    elif cfg.threads is None and os.environ.get("ROBTOK_THREADS"):
        cfg.threads = int(os.environ["ROBTOK_THREADS"])
    raw = {tuple(k.split(":")[1:]): v for k, v in vars(args).items() if k.startswith("ov:") and v is not None}
    return apply_overrides(cfg, raw)


def _thread_limit(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _out_dir(path: str) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo(cfg: RunConfig, directory: Path, extra: dict) -> None:
    dump_json({"config": cfg.to_dict(), "inputs": extra}, directory / RESOLVED)


def _load_model(path):
    return ck.model_from_checkpoint(ck.load_checkpoint(path))


def _load_tokens(path) -> RobTokens | None:
    return None if path is None else RobTokens(ck.tokens_from_checkpoint(ck.load_checkpoint(path)))


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg.data)
    try:
        model = pretrain_backbone(cfg.vit, data.split("train"), cfg.pretrain)
    except PretrainingFailed as exc:
        print(f"qualification failed: probe accuracy {exc.accuracy:.2f}% < {exc.floor:.2f}%", file=sys.stderr)
        return EXIT_CONTRACT
    ck.save_checkpoint(out, ck.model_checkpoint(model, cfg.seed, {"data": cfg.to_dict()["data"]}))
    _echo(cfg, out.parent, {"command": "pretrain", "out": str(out)})
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train_rob(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    ckpt = ck.load_checkpoint(args.model)
    model = ck.model_from_checkpoint(ckpt)
    data = generate_dataset(cfg.data)
    rob, record = train_loop(model, data.split("train").images, cfg.train, cfg.attack, cfg.num_tokens)
    ck.save_checkpoint(out / "tokens.ckpt", ck.tokens_checkpoint(rob.tokens, ckpt.config.get("config_hash"), cfg.seed))
    record.write_csv(out / "train.csv")
    _echo(cfg, out, {"command": "train-rob", "model": args.model})
    print(f"wrote {out / 'tokens.ckpt'} and {out / 'train.csv'}")
    return EXIT_OK


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1))


def cmd_attack(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    model = _load_model(args.model)
    data = generate_dataset(cfg.data)
    batch = data.split(args.split)[: args.n_images]
    if args.attack == "pgd":
        adv = atk.pgd_feature_attack(model, batch.images, cfg.attack)
    elif args.attack == "fgsm":
        adv = atk.fgsm_feature_attack(model, batch.images, cfg.attack)
    else:
        probe = data.split("probe")
        head = train_linear_probe(model, None, probe.images, probe.labels, cfg.vit.num_classes, cfg.probe)
        adv = atk.pgd_task_attack(model, head, batch.images, batch.labels, cfg.attack)
    rows = []
    for i in range(len(batch)):
        save_png(batch.images[i], out / f"clean_{i:04d}.png")
        save_png(adv.images[i], out / f"adv_{i:04d}.png")
        linf = float(np.max(np.abs(adv.images[i] - batch.images[i])))
        rows.append([i, int(batch.labels[i]), repr(float(adv.psnr_db[i])), repr(linf), int(adv.psnr_ok[i])])
    with open(out / "adversaries.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "psnr_db", "linf", "psnr_ok"])
        w.writerows(rows)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(TRACE_COLUMNS_HEAD) + [f"loss_{i}" for i in range(len(batch))])
        for s, vals in enumerate(adv.loss_trace):
            w.writerow([s, repr(float(np.mean(vals)))] + [repr(float(v)) for v in vals])
    _echo(cfg, out, {"command": "attack", "model": args.model, "attack": args.attack, "split": args.split})
    print(f"wrote {len(batch)} adversaries to {out}")
    return EXIT_OK


def validate_report(obj: dict) -> None:
    """Check an evaluation JSON against the documented schema."""
    if obj.get("mode") not in ("standard", "generalization") or not isinstance(obj.get("reports"), dict):
        raise ValueError("report must carry 'mode' and a 'reports' mapping")
    if "baseline" not in obj["reports"]:
        raise ValueError("report has no baseline row")
    for name, rep in obj["reports"].items():
        if set(rep) != set(REPORT_FIELDS):
            raise ValueError(f"report {name!r} has fields {sorted(rep)}")
        for key, tp in REPORT_FIELDS.items():
            if not isinstance(rep[key], tp) or (tp is int and isinstance(rep[key], bool)):
                raise ValueError(f"report {name!r} field {key!r} is not {tp.__name__}")


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    model = _load_model(args.model)
    rob = _load_tokens(args.tokens)
    data = generate_dataset(cfg.data)
    probe, ev = data.split("probe"), data.split("eval")
    if args.n_images is not None:
        ev = ev[: args.n_images]
    k = cfg.vit.num_classes
    head_plain = train_linear_probe(model, None, probe.images, probe.labels, k, cfg.probe)
    reports = {}
    if args.mode == "generalization":
        if rob is None:
            raise UsageError("--eval generalization needs --tokens")
        head_rob = train_linear_probe(model, rob, probe.images, probe.labels, k, cfg.probe)
        base, robust = generalization_eval(model, rob, ev.images, ev.labels, head_plain, head_rob, cfg.attack, "fgsm")
        reports = {"baseline": base.to_dict(), "tokens": robust.to_dict()}
    else:
        kind = None if args.attack == "none" else args.attack
        adv = None if kind is None else craft(model, ev.images, ev.labels, kind, cfg.attack, head_plain)
        reports["baseline"] = evaluate(model, None, head_plain, ev.images, ev.labels, kind, cfg.attack, adversaries=adv).to_dict()
        if rob is not None:
            head_rob = train_linear_probe(model, rob, probe.images, probe.labels, k, cfg.probe)
            reports["tokens"] = evaluate(model, rob, head_rob, ev.images, ev.labels, kind, cfg.attack, adversaries=adv).to_dict()
    result = {"mode": args.mode, "reports": reports}
    validate_report(result)
    dump_json(result, out / "report.json")
    _echo(cfg, out, {"command": "eval", "model": args.model, "tokens": args.tokens, "mode": args.mode})
    for name, rep in reports.items():
        print(f"{name:9s} clean {rep['clean_accuracy']:.2f}  adv {rep['adv_accuracy']:.2f}  cos {rep['feature_robustness']:.4f}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--counts must be comma-separated integers, got {args.counts!r}") from None
    if not counts or min(counts) < 1:
        raise UsageError("--counts needs at least one positive count")
    out = _out_dir(args.out)
    model = _load_model(args.model)
    data = generate_dataset(cfg.data)
    result = ablate_token_count(model, data.split("train").images, counts, cfg.train, cfg.attack)
    for c in result.counts:
        with open(out / f"curve_R{c}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows([s, repr(v)] for s, v in enumerate(result.curves[c]))
    with open(out / "curve_baseline.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([s, repr(v)] for s, v in enumerate(result.baseline_curve))
    dump_json(result.to_dict(), out / "ablation.json")
    _echo(cfg, out, {"command": "ablate", "model": args.model, "counts": counts})
    for c in result.counts:
        print(f"R={c:3d} final loss {result.final_loss[c]:.4f}")
    print(f"no tokens final loss {result.baseline_final:.4f}")
    return EXIT_OK


def cmd_probe_activations(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    model = _load_model(args.model)
    rob = _load_tokens(args.tokens)
    data = generate_dataset(cfg.data)
    ev = data.split("eval")
    if not 0 <= args.image_index < len(ev):
        raise UsageError(f"--image-index must lie in [0, {len(ev)})")
    report = massive_activation_report(model, rob, ev.images[args.image_index], cfg.attack)
    report.write_csv(out / "activations.csv")
    _echo(cfg, out, {"command": "probe-activations", "model": args.model, "tokens": args.tokens})
    print(f"gap without tokens {report.gap(False):.4f}, with tokens {report.gap(True):.4f}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-rob": cmd_train_rob,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "probe-activations": cmd_probe_activations,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit(cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"robtok: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PretrainingFailed, ContractError, FrozenWeightsViolation, DimensionError, DegenerateInputError) as exc:
        print(f"robtok: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, ck.CheckpointError) as exc:
        print(f"robtok: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
