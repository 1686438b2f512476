"""
posecon -- pose-supervised contrastive learning for weakly-supervised
action segmentation.

Usage:
    python segment.py synth --out data/ [--seed 0]
    python segment.py train --manifest data/manifest.json --out runs/pose [--mining pose --delta 0.15]
    python segment.py infer --manifest data/manifest.json --checkpoint runs/pose/checkpoint.bin --out preds/ [--mode online]
    python segment.py eval  --manifest data/manifest.json --predictions preds/ [--out preds/metrics.csv]

Any subcommand replays a resolved config with ``--config FILE``; flags given
on the command line still win.

Exit codes: 0 ok, 2 usage/config error, 3 I/O or parse error,
4 numeric divergence, 5 prediction/ground-truth length mismatch.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from posecon.dataio_synth import SynthConfig, generate_synthetic, load_dataset, read_labels, write_labels
from posecon.embedding_nets import (
    DEFAULT_DROPOUT,
    DEFAULT_EMBED_DIM,
    DEFAULT_HIDDEN,
    EncoderParams,
    ProjectionParams,
    load_checkpoint,
    save_checkpoint,
)
from posecon.errors import (
    ConfigError,
    DimensionError,
    IoError,
    LengthMismatch,
    NumericDivergence,
    ParseError,
    PoseconError,
)
from posecon.metrics import evaluate_dataset, evaluate_video
from posecon.weak_segmentation import (
    ClassifierHead,
    DecodeMode,
    HeadSource,
    SegmentationModel,
    TrainConfig,
    infer,
    train,
)

logger = logging.getLogger("posecon")

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

CHECKPOINT_NAME = "checkpoint.bin"
RUN_LOG_NAME = "run_log.jsonl"
METRICS_NAME = "metrics.csv"
METRIC_COLUMNS = ("acc", "iou", "edit", "f1_at_50")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_LENGTH = 5


@dataclass
class RunConfig:
    """Fully resolved options of one CLI run; written next to its outputs."""

    subcommand: str
    out: Optional[str] = None
    manifest: Optional[str] = None
    seed: int = 0
    # synth
    num_train: int = 40
    num_test: int = 10
    classes: int = 5
    keypoints: int = 17
    feature_dim: int = 32
    pose_noise: float = 0.05
    feature_noise: float = 0.6
    scene_noise: float = 2.0
    missing_pose: float = 0.1
    # train
    mining: str = "pose"
    delta: float = 0.15
    tau: float = 0.07
    lr: float = 0.01
    iters: int = 500
    con_weight: float = 1.0
    hidden: int = DEFAULT_HIDDEN
    embed_dim: int = DEFAULT_EMBED_DIM
    dropout: float = DEFAULT_DROPOUT
    head_source: str = HeadSource.PROJECTION.value
    # infer / eval
    checkpoint: Optional[str] = None
    mode: str = DecodeMode.OFFLINE.value
    split: str = "test"
    predictions: Optional[str] = None
    background: tuple = ()

    def validate(self) -> None:
        required = {
            "synth": ("out",),
            "train": ("manifest", "out"),
            "infer": ("manifest", "checkpoint", "out"),
            "eval": ("manifest", "predictions"),
        }[self.subcommand]
        missing = [name for name in required if not getattr(self, name)]
        if missing:
            raise ConfigError(f"{self.subcommand}: missing required option(s): " + ", ".join(f"--{m.replace('_', '-')}" for m in missing))
        if self.subcommand == "train":
            self.train_config()
        if self.subcommand == "synth":
            self.synth_config()

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_train=self.num_train,
            num_test=self.num_test,
            num_classes=self.classes,
            num_keypoints=self.keypoints,
            feature_dim=self.feature_dim,
            pose_noise=self.pose_noise,
            feature_noise=self.feature_noise,
            scene_noise=self.scene_noise,
            missing_pose_fraction=self.missing_pose,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mining=self.mining,
            delta=self.delta,
            tau=self.tau,
            lr=self.lr,
            iterations=self.iters,
            seed=self.seed,
            con_weight=self.con_weight,
            hidden=self.hidden,
            embed_dim=self.embed_dim,
            dropout=self.dropout,
            head_source=self.head_source,
        )

    def save(self, directory) -> Path:
        path = Path(directory) / f"{self.subcommand}_config.json"
        payload = asdict(self)
        payload["background"] = list(self.background)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(path, f"cannot write resolved config: {exc}") from exc
        return path


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    ap = argparse.ArgumentParser(prog="segment.py", description="Pose-supervised weakly-supervised action segmentation.")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="replay a resolved *_config.json")
        p.add_argument("--verbose", action="store_true")
        p.add_argument("--quiet", action="store_true")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out")
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--keypoints", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--pose-noise", type=float)
    p.add_argument("--feature-noise", type=float)
    p.add_argument("--scene-noise", type=float, help="std of the per-video appearance offset")
    p.add_argument("--missing-pose", type=float)
    synth = p

    p = sub.add_parser("train", help="train on the train split")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--mining", choices=["none", "vanilla", "pose"])
    p.add_argument("--delta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--con-weight", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--head-source", choices=[h.value for h in HeadSource])
    train_p = p

    p = sub.add_parser("infer", help="decode every video of a split")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--mode", choices=[m.value for m in DecodeMode])
    p.add_argument("--split")
    infer_p = p

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--predictions")
    p.add_argument("--out", help=f"CSV path (default: <predictions>/{METRICS_NAME})")
    p.add_argument("--split")
    p.add_argument("--background", nargs="*", help="class names treated as background")
    eval_p = p

    return ap, {"synth": synth, "train": train_p, "infer": infer_p, "eval": eval_p}


def resolve_config(argv: Optional[list[str]] = None) -> tuple[RunConfig, argparse.Namespace]:
    """Merge dataclass defaults, an optional ``--config`` file and explicit flags."""
    ap, _ = build_parser()
    args = ap.parse_args(argv)

    values: dict = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise IoError(args.config, f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg})") from exc
        if values.get("subcommand", args.subcommand) != args.subcommand:
            raise ConfigError(f"{args.config} belongs to '{values['subcommand']}', not '{args.subcommand}'")

    known = {f.name for f in fields(RunConfig)}
    values = {k: v for k, v in values.items() if k in known}
    for key, value in vars(args).items():
        if key in known and value is not None:
            values[key] = value
    values["subcommand"] = args.subcommand
    if "background" in values:
        values["background"] = tuple(values["background"])

    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg, args


# ---------------------------------------------------------------------------
# Model <-> checkpoint
# ---------------------------------------------------------------------------

def save_model(path, model: SegmentationModel, cfg: RunConfig, classes: list[str]) -> Path:
    meta = {
        "classes": classes,
        "head_source": model.head_source.value,
        "dropout": model.encoder.dropout_rate,
        "seed": cfg.seed,
    }
    return save_checkpoint(path, model.tensors(), meta)


def load_model(path) -> tuple[SegmentationModel, dict]:
    tensors, meta = load_checkpoint(path)
    try:
        enc = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith("encoder.")}
        model = SegmentationModel(
            encoder=EncoderParams(**enc, dropout_rate=float(meta.get("dropout", 0.0))),
            projection=ProjectionParams(W=tensors["projection.W"], b=tensors["projection.b"]),
            head=ClassifierHead(W=tensors["head.W"], b=tensors["head.b"]),
            head_source=HeadSource(meta.get("head_source", HeadSource.PROJECTION.value)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, f"checkpoint does not hold a full model: {exc}") from exc
    return model, meta


def check_model_fits(model: SegmentationModel, meta: dict, manifest) -> None:
    """Reject a checkpoint whose shapes or class names disagree with the dataset."""
    expected = {
        "feature dim F": (model.projection.feature_dim, manifest.feature_dim),
        "keypoints K": (model.encoder.input_dim // 2, manifest.num_keypoints),
        "classes C": (model.head.num_classes, manifest.num_classes),
    }
    for name, (have, want) in expected.items():
        if have != want:
            raise DimensionError(f"checkpoint has {name}={have}, manifest has {want}")
    classes = meta.get("classes")
    if classes is not None and list(classes) != list(manifest.classes):
        raise ConfigError(f"checkpoint classes {classes} differ from manifest classes {manifest.classes}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    manifest = generate_synthetic(cfg.synth_config(), cfg.out)
    cfg.save(cfg.out)
    print(manifest.path)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    dataset = load_dataset(cfg.manifest)
    videos = dataset.split("train")
    manifest = dataset.manifest

    train_cfg = cfg.train_config()
    cfg.save(out)

    log_path = out / RUN_LOG_NAME
    try:
        with open(log_path, "w", encoding="utf-8") as log:
            result = train(
                videos,
                train_cfg,
                num_classes=manifest.num_classes,
                on_report=lambda record: log.write(json.dumps(record, sort_keys=True) + "\n"),
            )
    except OSError as exc:
        raise IoError(log_path, f"cannot write run log: {exc}") from exc

    save_model(out / CHECKPOINT_NAME, result.model, cfg, manifest.classes)
    if result.reports:
        first, last = result.reports[0], result.reports[-1]
        logger.info("l_final %.4f -> %.4f over %d iterations", first["l_final"], last["l_final"], len(result.reports))
    logger.info("Checkpoint written to %s", out / CHECKPOINT_NAME)
    return EXIT_OK


def cmd_infer(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    dataset = load_dataset(cfg.manifest, split=cfg.split)
    model, meta = load_model(cfg.checkpoint)
    check_model_fits(model, meta, dataset.manifest)
    mode = DecodeMode(cfg.mode)

    for video in dataset.videos:
        segmentation = infer(model, video, mode)
        write_labels(out / f"{video.video_id}.txt", segmentation.frame_labels, dataset.manifest.classes)
    cfg.save(out)
    logger.info("Decoded %d videos (%s) into %s", len(dataset.videos), mode.value, out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    dataset = load_dataset(cfg.manifest, split=cfg.split)
    classes = dataset.manifest.classes
    background = set()
    for name in cfg.background:
        if name not in classes:
            raise ConfigError(f"unknown background class {name!r}")
        background.add(classes.index(name))

    pred_dir = Path(cfg.predictions)
    reports = {}
    for video in dataset.videos:
        if video.ground_truth is None:
            raise DimensionError(f"{video.video_id}: no ground-truth labels to evaluate against")
        pred = read_labels(pred_dir / f"{video.video_id}.txt", classes)
        if len(pred) != len(video.ground_truth):
            raise LengthMismatch(f"{video.video_id}: {len(pred)} predicted frames vs {len(video.ground_truth)} ground truth")
        reports[video.video_id] = evaluate_video(pred.tolist(), video.ground_truth.tolist(), background)

    mean = evaluate_dataset(reports)
    out = Path(cfg.out) if cfg.out else pred_dir / METRICS_NAME
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(("video_id",) + METRIC_COLUMNS)
            for video_id, report in reports.items():
                row = report.row()
                writer.writerow([video_id] + [f"{row[c]:.6f}" for c in METRIC_COLUMNS])
            writer.writerow(["mean"] + [f"{mean[c]:.6f}" for c in METRIC_COLUMNS])
    except OSError as exc:
        raise IoError(out, f"cannot write metrics: {exc}") from exc
    cfg.save(out.parent)

    print(",".join(["mean"] + [f"{mean[c]:.6f}" for c in METRIC_COLUMNS]))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


# ---------------------------------------------------------------------------
# Entry
# ---------------------------------------------------------------------------

def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    try:
        cfg, args = resolve_config(argv)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (IoError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)

    try:
        return COMMANDS[cfg.subcommand](cfg)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except LengthMismatch as exc:
        logger.error("%s", exc)
        return EXIT_LENGTH
    except NumericDivergence as exc:
        logger.error("Training diverged at iteration %d: %s", exc.iteration, exc)
        return EXIT_DIVERGED
    except (ParseError, DimensionError, IoError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except PoseconError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
