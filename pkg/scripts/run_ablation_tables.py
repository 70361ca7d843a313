#!/usr/bin/env python3
"""Train the ablation arms on a fresh phantom set and emit comparison tables.

A thin wrapper over ``gmmas bench`` that also generates the dataset, sized for
a coffee-break CPU run. Tables land in <out>/ as Markdown + CSV, each cell
recomputable from the per-case logs in <out>/bench_logs/.
"""

import argparse
import json
from pathlib import Path

from gmmas.augment import AugmentationPolicy, AugOp
from gmmas.bench import BenchConfig, run_bench
from gmmas.network import NetworkConfig
from gmmas.phantoms import PhantomRuleSet, generate_phantom_dataset
from gmmas.training import OptimizerConfig, RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cases", type=int, default=30)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    generate_phantom_dataset(
        args.seed, args.cases, (args.size,) * 3, PhantomRuleSet.default(), data,
        unlabeled_fraction=0.2,
    )
    run = RunConfig(
        manifest=str(data / "manifest.json"),
        out_dir=str(out),
        seed=args.seed,
        epochs=args.epochs,
        batch_size=4,
        network=NetworkConfig.toy(
            base_channels=4, embed_channels=32, classifier_hidden=32,
            pos_grid=(2, 2, 2), transformer_layers=2,
        ),
        optimizer=OptimizerConfig(name="adam", lr=1e-3, lr_decay="cosine"),
        policy=AugmentationPolicy(
            ops=[AugOp("flip", 0.5, {"axis_probs": [0.5, 0.5, 0.5]})], rng_seed=args.seed
        ),
    )
    run.ssl.mc_passes = 4
    run.ssl.stage1_rounds = 1
    run.ssl.stage1_epochs = 2
    run.ssl.stage2_epochs = 1
    result = run_bench(BenchConfig(run=run))
    for name, table in result["tables"].items():
        print(f"## {name}")
        print(table["markdown"])
        print()


if __name__ == "__main__":
    main()
