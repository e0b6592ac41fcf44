#!/usr/bin/env python3
"""Epoch sweep over a manifest: one full LOSO run per epoch setting.

Flows are computed once (or reused from a previous run) under --out/flows.

    python3 scripts/epoch_sweep.py corpus/manifest.json --out sweep_run \
        --epochs-list 1000 2000 3000 4000 5000
"""

import argparse
import json
import sys
from pathlib import Path

from apexflow.cli import PipelineConfig, ensure_flows
from apexflow.apexspot import RoiSet
from apexflow.dataset import TARGET_HEIGHT, TARGET_WIDTH, load_manifest
from apexflow.evaluation import epoch_sweep, flow_store_from_dir
from apexflow.offapexnet import TrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("manifest", type=Path)
    parser.add_argument("--out", type=Path, default=Path("sweep_run"))
    parser.add_argument("--epochs-list", type=int, nargs="+", default=[1000, 2000, 3000, 4000, 5000])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=2)
    args = parser.parse_args()

    records = load_manifest(args.manifest)
    cfg = PipelineConfig(manifest=args.manifest, out_dir=args.out, jobs=args.jobs)
    rois = RoiSet.default_for(TARGET_HEIGHT, TARGET_WIDTH)
    store = flow_store_from_dir(records, ensure_flows(records, cfg, rois))

    result = epoch_sweep(
        records,
        store,
        TrainConfig(epochs=args.epochs_list[0], seed=args.seed),
        args.epochs_list,
        jobs=args.jobs,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "sweep.txt").write_text(result.render_text(), encoding="utf-8")
    (args.out / "sweep.json").write_text(
        json.dumps(result.to_json_dict(), indent=2), encoding="utf-8"
    )
    print(result.render_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
