"""Command-line entry point: dataset generation, training, evaluation,
augmentation inspection, and the component-ablation ladder.

Exit codes: 0 success, 2 usage/config/I-O error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment, postext, synthdata, trainer

ABLATION_FLAGS = {
    "ema": "use_ema_ssl",
    "posaug": "use_posaug",
    "tpatchmix": "use_tpatchmix",
    "itcl": "use_itcl",
}

# cumulative ladder, first row disables everything
LADDER = [
    ("baseline", ["ema", "posaug", "tpatchmix", "itcl"]),
    ("+t-s-ema", ["posaug", "tpatchmix", "itcl"]),
    ("+posaug", ["tpatchmix", "itcl"]),
    ("+tpatchmix", ["itcl"]),
    ("+itcl", []),
]


def _load_config(args) -> trainer.TrainConfig:
    config = (trainer.TrainConfig.from_file(Path(args.config))
              if getattr(args, "config", None) else trainer.TrainConfig())
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "label_ratio", None) is not None:
        config = replace(config, label_ratio=args.label_ratio)
    return config


def _apply_ablations(config, names):
    for name in names:
        if name not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation component {name!r} "
                             f"(choose from {sorted(ABLATION_FLAGS)})")
        config = replace(config, **{ABLATION_FLAGS[name]: False})
    return config


def cmd_gen_data(args):
    manifest = synthdata.generate_dataset(args.seed, args.n_train, args.n_val,
                                          args.n_test, Path(args.out))
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    for ratio, ids in sorted(manifest.labeled_ids.items(), key=lambda kv: float(kv[0])):
        print(f"labeled@{float(ratio):.0%}: {len(ids)}")
    return 0


def cmd_train(args, force_supervised=False):
    config = _load_config(args)
    if args.ablate:
        config = _apply_ablations(config, [a.strip() for a in args.ablate.split(",") if a.strip()])
    if force_supervised:
        config = replace(config, burnin_fraction=1.0, lambda_u=0.0)
    dataset = synthdata.load_dataset(Path(args.data))
    best = trainer.train(config, dataset, Path(args.out))
    print(f"best checkpoint: {best}")
    return 0


def cmd_eval(args):
    dataset = synthdata.load_dataset(Path(args.data))
    report = trainer.evaluate_checkpoint(Path(args.ckpt), dataset, args.split)
    out_path = Path(args.ckpt).with_suffix(f".eval_{args.split}.jsonl")
    with open(out_path, "w", encoding="utf-8") as f:
        for rec in report["records"]:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.write(json.dumps(report["summary"], sort_keys=True) + "\n")
    print(json.dumps(report["summary"], sort_keys=True))
    print(f"report: {out_path}")
    return 0


def cmd_augshow(args):
    """Write K augmented/mixed samples for visual audit.

    Ground-truth masks stand in for teacher probability maps so the command
    works without a trained checkpoint.
    """
    dataset = synthdata.load_dataset(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_samples = dataset.split("train")
    rng = np.random.default_rng(args.seed)
    mix_cfg = augment.MixConfig()
    for k in range(args.n):
        i, j = rng.choice(len(train_samples), size=2, replace=False)
        s_i, s_j = train_samples[i], train_samples[j]
        weak_i, _, _ = augment.weak_augment(s_i.image, rng=rng)
        weak_j, _, _ = augment.weak_augment(s_j.image, rng=rng)
        strong = augment.strong_photometric(weak_i, rng)
        expr_i = postext.parse_positions(s_i.text)
        expr_j = postext.parse_positions(s_j.text)
        outcome = augment.tpatchmix((weak_i, expr_i), (weak_j, expr_j),
                                    s_i.mask, s_j.mask, mix_cfg, rng)
        posaug_text = postext.posaug(expr_i, 0.5, rng).text
        stem = f"sample_{k:03d}"
        synthdata.write_pgm(out / f"{stem}_weak.pgm", weak_i)
        synthdata.write_pgm(out / f"{stem}_strong.pgm", strong)
        synthdata.write_pgm(out / f"{stem}_mixed.pgm", outcome.mixed_image)
        synthdata.write_pgm(out / f"{stem}_pseudo_mask.pgm", outcome.mixed_pseudo_mask)
        with open(out / f"{stem}.txt", "w", encoding="utf-8") as f:
            f.write(f"original: {s_i.text}\n")
            f.write(f"posaug: {posaug_text}\n")
            f.write(f"mixed: {outcome.mixed_text.text}\n")
            f.write(f"mode: {outcome.mode} applied: {outcome.applied} "
                    f"gate_ratio: {outcome.gate_ratio:.4f}\n")
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_ablate(args):
    base = _load_config(args)
    dataset = synthdata.load_dataset(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, disabled in LADDER:
        config = _apply_ablations(base, disabled)
        run_dir = out / name.replace("+", "plus_").replace("-", "_")
        best = trainer.train(config, dataset, run_dir)
        report = trainer.evaluate_checkpoint(best, dataset, "test")
        rows.append({"row": name, **report["summary"]})
        print(json.dumps(rows[-1], sort_keys=True))
    with open(out / "ablation_summary.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"summary: {out / 'ablation_summary.jsonl'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="posref",
                                description="Semi-supervised referring lung segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=40)
    g.add_argument("--n-test", type=int, default=40)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    for name, supervised in (("train", False), ("burnin", True)):
        t = sub.add_parser(name, help="supervised-only training" if supervised
                           else "burn-in + semi-supervised training")
        t.add_argument("--data", required=True)
        t.add_argument("--config")
        t.add_argument("--label-ratio", type=float)
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--ablate", default="",
                       help="comma list of components to disable: ema,posaug,tpatchmix,itcl")
        t.set_defaults(func=lambda a, s=supervised: cmd_train(a, force_supervised=s))

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augshow", help="dump augmented/mixed samples")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_augshow)

    b = sub.add_parser("ablate", help="run the 5-row component ablation ladder")
    b.add_argument("--data", required=True)
    b.add_argument("--config")
    b.add_argument("--label-ratio", type=float)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
