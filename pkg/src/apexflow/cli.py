"""Command-line pipeline driver.

Subcommands cover every stage: `ingest`, `spot-apex`, `flow`, `train`,
`eval`, `sweep`, `flow-viz`, and `synth`. A JSON config file supplies
defaults and command-line flags override it. Intermediate artifacts (flow
fields, checkpoints, reports) persist under the output directory so stages
can resume. Exit codes: 0 success, 1 validation error, 2 runtime failure;
failures emit one machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from . import dataset as ds
from .apexspot import Roi, RoiBoundsError, RoiRole, RoiSet, resolve_apex, spot_apex
from .evaluation import (
    MissingFlowError,
    epoch_sweep,
    flow_store_from_dir,
    run_losocv,
    write_report,
)
from .offapexnet import (
    CheckpointError,
    TrainConfig,
    save_checkpoint,
    train,
)
from .synthetic import SynthConfig, generate_corpus
from .tvl1flow import (
    FlowFormatError,
    TvL1Params,
    estimate_flow,
    flow_to_color,
    read_flo,
    write_flo,
)

log = logging.getLogger("apexflow")

DEFAULT_EPOCHS = 3000
DEFAULT_EPOCHS_LIST = [1000, 2000, 3000, 4000, 5000]

_VALIDATION_ERRORS = (
    ds.ManifestError,
    ds.FrameLoadError,
    RoiBoundsError,
    FlowFormatError,
    CheckpointError,
    MissingFlowError,
    FileNotFoundError,
    ValueError,
    KeyError,
)


@dataclass
class PipelineConfig:
    manifest: Path | None = None
    out_dir: Path = Path("apexflow_out")
    tvl1: TvL1Params = field(default_factory=TvL1Params)
    rois_path: Path | None = None
    learning_rate: float = 1e-4
    epochs: int = DEFAULT_EPOCHS
    dropout_keep: float = 0.5
    seed: int = 0
    epochs_list: list[int] = field(default_factory=lambda: list(DEFAULT_EPOCHS_LIST))
    write_png: bool = False
    jobs: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            dropout_keep=self.dropout_keep,
            seed=self.seed,
        )


def load_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    """Merge the optional JSON config file with command-line flags (flags win)."""
    cfg = PipelineConfig()
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError(f"config file must hold a JSON object: {path}")
        if "manifest" in raw:
            cfg.manifest = Path(raw["manifest"])
        if "out_dir" in raw:
            cfg.out_dir = Path(raw["out_dir"])
        if "tvl1" in raw:
            try:
                cfg.tvl1 = TvL1Params(**raw["tvl1"])
            except TypeError as exc:
                raise ValueError(f"invalid tvl1 config: {exc}") from exc
        if "rois" in raw:
            cfg.rois_path = Path(raw["rois"])
        train_raw = raw.get("train", {})
        cfg.learning_rate = float(train_raw.get("learning_rate", cfg.learning_rate))
        cfg.epochs = int(train_raw.get("epochs", cfg.epochs))
        cfg.dropout_keep = float(train_raw.get("dropout_keep", cfg.dropout_keep))
        cfg.seed = int(train_raw.get("seed", cfg.seed))
        if "epochs_list" in raw:
            cfg.epochs_list = [int(e) for e in raw["epochs_list"]]
        cfg.write_png = bool(raw.get("write_png", cfg.write_png))
        cfg.jobs = int(raw.get("jobs", cfg.jobs))

    if getattr(args, "manifest", None):
        cfg.manifest = Path(args.manifest)
    if getattr(args, "out", None):
        cfg.out_dir = Path(args.out)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "png", False):
        cfg.write_png = True
    if getattr(args, "rois", None):
        cfg.rois_path = Path(args.rois)
    if getattr(args, "epochs_list", None):
        cfg.epochs_list = args.epochs_list
    return cfg


def load_roi_set(path: str | Path | None) -> RoiSet:
    """RoiSet from a JSON override file, or the thirds-of-face defaults."""
    if path is None:
        return RoiSet.default_for(ds.TARGET_HEIGHT, ds.TARGET_WIDTH)
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    rois = {}
    for role in RoiRole:
        if role.value not in raw:
            raise ValueError(f"roi file missing role {role.value!r}")
        x, y, w, h = (int(v) for v in raw[role.value])
        rois[role.value] = Roi(x, y, w, h)
    roi_set = RoiSet(
        left_eyebrow=rois[RoiRole.LEFT_EYEBROW.value],
        right_eyebrow=rois[RoiRole.RIGHT_EYEBROW.value],
        mouth=rois[RoiRole.MOUTH.value],
    )
    roi_set.validate_for(ds.TARGET_HEIGHT, ds.TARGET_WIDTH)
    return roi_set


def _require_manifest(cfg: PipelineConfig) -> list[ds.SampleRecord]:
    if cfg.manifest is None:
        raise ValueError("no manifest given (positional argument or config file)")
    return ds.load_manifest(cfg.manifest)


# ---------------------------------------------------------------------------
# flow computation shared by `flow`, `train`, and `eval`


def _flow_worker(job: tuple) -> str:
    record, params, rois, flo_path, png_path = job
    seq = ds.load_sequence(record)
    apex = resolve_apex(record, seq, rois)
    flow = estimate_flow(seq[record.onset_index - 1], seq[apex - 1], params)
    write_flo(flow, flo_path)
    if png_path is not None:
        Image.fromarray(flow_to_color(flow)).save(png_path)
    return record.video_id


def ensure_flows(records: list[ds.SampleRecord], cfg: PipelineConfig, rois: RoiSet) -> Path:
    """Compute any missing `<video_id>.flo` under out_dir/flows; returns the dir."""
    flow_dir = cfg.out_dir / "flows"
    flow_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for record in records:
        flo_path = flow_dir / f"{record.video_id}.flo"
        if flo_path.exists():
            continue
        png_path = flow_dir / f"{record.video_id}.png" if cfg.write_png else None
        jobs.append((record, cfg.tvl1, rois, flo_path, png_path))
    if not jobs:
        return flow_dir
    log.info("computing %d flow fields (%d workers)", len(jobs), max(1, cfg.jobs))
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for video_id in pool.map(_flow_worker, jobs):
                log.debug("flow done: %s", video_id)
    else:
        for job in jobs:
            log.debug("flow done: %s", _flow_worker(job))
    return flow_dir


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(cfg: PipelineConfig) -> int:
    records = _require_manifest(cfg)
    counts = ds.class_counts(records)
    print(f"records: {len(records)}")
    for cls in ds.EmotionClass:
        print(f"{cls.name.lower()}: {counts[cls]}")
    datasets = sorted({r.dataset_id.value for r in records})
    subjects = len({(r.dataset_id, r.subject_id) for r in records})
    print(f"datasets: {','.join(datasets)}")
    print(f"subjects: {subjects}")
    return 0


def cmd_spot_apex(cfg: PipelineConfig) -> int:
    records = _require_manifest(cfg)
    rois = load_roi_set(cfg.rois_path)
    print("video_id,predicted_apex,ground_truth_apex")
    for record in records:
        seq = ds.load_sequence(record)
        predicted = spot_apex(seq, rois)
        truth = "" if record.apex_index is None else str(record.apex_index)
        print(f"{record.video_id},{predicted},{truth}")
    return 0


def cmd_flow(cfg: PipelineConfig) -> int:
    records = _require_manifest(cfg)
    rois = load_roi_set(cfg.rois_path)
    flow_dir = ensure_flows(records, cfg, rois)
    print(f"flows written to {flow_dir}")
    return 0


def cmd_train(cfg: PipelineConfig) -> int:
    records = _require_manifest(cfg)
    rois = load_roi_set(cfg.rois_path)
    flow_dir = ensure_flows(records, cfg, rois)
    store = flow_store_from_dir(records, flow_dir)
    samples = [(store[(r.dataset_id.value, r.subject_id, r.video_id)], r.label) for r in records]
    params, loss_curve = train(samples, cfg.train_config())
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.out_dir / "checkpoint.bin"
    save_checkpoint(params, None, ckpt)
    (cfg.out_dir / "loss_curve.json").write_text(
        json.dumps([float(x) for x in loss_curve]), encoding="utf-8"
    )
    print(f"checkpoint written to {ckpt} (final loss {loss_curve[-1]:.6f})")
    return 0


def cmd_eval(cfg: PipelineConfig) -> int:
    records = _require_manifest(cfg)
    rois = load_roi_set(cfg.rois_path)
    flow_dir = ensure_flows(records, cfg, rois)
    store = flow_store_from_dir(records, flow_dir)
    report = run_losocv(records, store, cfg.train_config(), jobs=cfg.jobs)
    paths = write_report(report, cfg.out_dir)
    print(report.render_text(), end="")
    print(f"report written to {paths[0].parent}")
    return 0


def cmd_sweep(cfg: PipelineConfig) -> int:
    records = _require_manifest(cfg)
    rois = load_roi_set(cfg.rois_path)
    flow_dir = ensure_flows(records, cfg, rois)
    store = flow_store_from_dir(records, flow_dir)
    result = epoch_sweep(records, store, cfg.train_config(), cfg.epochs_list, jobs=cfg.jobs)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "sweep.txt").write_text(result.render_text(), encoding="utf-8")
    (cfg.out_dir / "sweep.json").write_text(
        json.dumps(result.to_json_dict(), indent=2), encoding="utf-8"
    )
    print(result.render_text(), end="")
    return 0


def cmd_flow_viz(cfg: PipelineConfig) -> int:
    records = _require_manifest(cfg)
    flow_dir = cfg.out_dir / "flows"
    written = 0
    for record in records:
        flo_path = flow_dir / f"{record.video_id}.flo"
        if not flo_path.is_file():
            raise MissingFlowError(f"no flow file for {record.video_id}: run `flow` first")
        flow = read_flo(flo_path)
        Image.fromarray(flow_to_color(flow)).save(flow_dir / f"{record.video_id}.png")
        written += 1
    print(f"{written} flow images written to {flow_dir}")
    return 0


def cmd_synth(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    synth = SynthConfig(
        n_subjects=args.subjects,
        videos_per_subject=args.videos_per_subject,
        n_frames=args.frames,
        seed=cfg.seed,
    )
    manifest_path, truths = generate_corpus(cfg.out_dir, synth)
    print(f"manifest written to {manifest_path} ({len(truths)} videos)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="parallel workers (default 1)")
    common.add_argument("--seed", type=int, help="base random seed")

    parser = argparse.ArgumentParser(
        prog="apexflow",
        description="Micro-expression recognition pipeline over onset/apex optical flow",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def manifest_cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("manifest", nargs="?", help="manifest JSON (or set in config)")
        return p

    manifest_cmd("ingest", "validate a manifest and print class counts")

    p = manifest_cmd("spot-apex", "print apex predictions as CSV")
    p.add_argument("--rois", help="RoI override JSON file")

    p = manifest_cmd("flow", "write a .flo flow field per video")
    p.add_argument("--rois", help="RoI override JSON file")
    p.add_argument("--png", action="store_true", help="also write flow-color PNGs")

    p = manifest_cmd("train", "train on all samples and write a checkpoint")
    p.add_argument("--rois", help="RoI override JSON file")
    p.add_argument("--epochs", type=int, help="training epochs")

    p = manifest_cmd("eval", "run leave-one-subject-out evaluation")
    p.add_argument("--rois", help="RoI override JSON file")
    p.add_argument("--epochs", type=int, help="training epochs per fold")

    p = manifest_cmd("sweep", "run the epoch sweep")
    p.add_argument("--rois", help="RoI override JSON file")
    p.add_argument(
        "--epochs-list", type=int, nargs="+", dest="epochs_list",
        help="epoch values to sweep",
    )

    manifest_cmd("flow-viz", "write flow-color PNGs for existing .flo files")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--videos-per-subject", type=int, default=6, dest="videos_per_subject")
    p.add_argument("--frames", type=int, default=30)

    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("APEXFLOW_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _emit_error(exc: BaseException) -> None:
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1

    try:
        cfg = load_pipeline_config(args)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "spot-apex":
            return cmd_spot_apex(cfg)
        if args.command == "flow":
            return cmd_flow(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "flow-viz":
            return cmd_flow_viz(cfg)
        if args.command == "synth":
            return cmd_synth(cfg, args)
        raise ValueError(f"unknown command {args.command!r}")
    except _VALIDATION_ERRORS as exc:
        _emit_error(exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps failures to exit 2
        _emit_error(exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
