#!/usr/bin/env python3
"""Component ablation ladder on the synthetic dataset.

Generates (or reuses) a 200/40/40 dataset and runs the five-row ladder
(supervised baseline, +teacher-student EMA, +position-text augmentation,
+patch mixing, +contrastive alignment), printing test metrics per row.
"""
import argparse
import json
from pathlib import Path

from posref import cli
from posref.synthdata import generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", type=Path, default=Path("runs/ablation/data"))
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--label-ratio", type=float, default=0.05)
    args = ap.parse_args()

    if not (args.data / "manifest.jsonl").exists():
        generate_dataset(0, 200, 40, 40, args.data)

    args.out.mkdir(parents=True, exist_ok=True)
    config_path = args.out / "config.json"
    config_path.write_text(json.dumps({"seed": args.seed,
                                       "epochs_total": args.epochs,
                                       "label_ratio": args.label_ratio}))
    rc = cli.main(["ablate", "--data", str(args.data),
                   "--config", str(config_path), "--out", str(args.out)])
    raise SystemExit(rc)


if __name__ == "__main__":
    main()
