#!/usr/bin/env python3
"""
Multi-run experiments on the synthetic dataset, driven through segment.py.

    directional   baseline / vanilla / pose-mined training over several seeds;
                  checks that mean test IoU orders pose >= vanilla >= baseline
    sensitivity   pose-mined training over a grid of delta values
    reference     pose-only and RGB+pose fusion heads next to baseline and pose

Progress is kept in a JSON state file so an interrupted sweep resumes where
it stopped.
"""

import csv
import json
import logging
import os
import subprocess
import sys

# ---------- CONFIG ----------
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CLI = os.path.join(ROOT, "segment.py")

WORK_DIR = os.path.join("experiments", "runs")
DATA_SEED = 0
SEEDS = [0, 1, 2, 3, 4]
ITERATIONS = 2000

VARIANTS = {
    "baseline": ["--mining", "none"],
    "vanilla": ["--mining", "vanilla"],
    "pose": ["--mining", "pose", "--delta", "0.15"],
}
# these heads also read the pose stream at test time
REFERENCE_VARIANTS = {
    "pose_only": ["--mining", "none", "--head-source", "pose"],
    "fusion": ["--mining", "none", "--head-source", "fusion"],
}
# 0 reproduces vanilla; the largest value leaves no negatives, i.e. the baseline
DELTA_GRID = [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0, 1e6]
MIN_MARGIN = 0.02
METRICS = ["acc", "iou", "edit", "f1_at_50"]
# ----------------------------

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


def load_state(path):
    if os.path.exists(path):
        with open(path, "r") as f:
            return json.load(f)
    return {}


def save_state(path, data):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)


def run_cli(*args):
    cmd = [sys.executable, CLI, *args, "--quiet"]
    logging.info("Running: %s", " ".join(cmd))
    return subprocess.check_output(cmd, text=True)


def ensure_dataset(work_dir):
    manifest = os.path.join(work_dir, "data", "manifest.json")
    if not os.path.exists(manifest):
        run_cli("synth", "--out", os.path.dirname(manifest), "--seed", str(DATA_SEED))
    return manifest


def train_and_score(manifest, run_dir, seed, iterations, flags):
    """Train, decode the test split offline and return the dataset-mean metrics."""
    run_cli("train", "--manifest", manifest, "--out", run_dir, "--seed", str(seed), "--iters", str(iterations), *flags)
    preds = os.path.join(run_dir, "predictions")
    run_cli("infer", "--manifest", manifest, "--checkpoint", os.path.join(run_dir, "checkpoint.bin"), "--out", preds)
    line = run_cli("eval", "--manifest", manifest, "--predictions", preds).strip().splitlines()[-1]
    values = line.split(",")[1:]
    return {name: float(v) for name, v in zip(METRICS, values)}


def run_sweep(work_dir, state_file, jobs, iterations):
    """Run every (key, seed, flags) job not yet in the state file."""
    os.makedirs(work_dir, exist_ok=True)
    manifest = ensure_dataset(work_dir)
    state = load_state(state_file)

    for key, seed, flags in jobs:
        name = f"{key}/seed_{seed}"
        if name in state:
            continue
        try:
            state[name] = train_and_score(manifest, os.path.join(work_dir, key, f"seed_{seed}"), seed, iterations, flags)
        except subprocess.CalledProcessError as exc:
            logging.error("Run %s failed with exit code %d", name, exc.returncode)
            save_state(state_file, state)
            return None
        save_state(state_file, state)
    return state


def summarize(state, keys, out_csv):
    rows = []
    for key in keys:
        runs = [v for name, v in state.items() if name.split("/")[0] == key]
        row = {"variant": key, "runs": len(runs)}
        for metric in METRICS:
            row[metric] = sum(r[metric] for r in runs) / len(runs) if runs else float("nan")
        rows.append(row)

    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "runs", *METRICS], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    logging.info("Summary written to %s", out_csv)
    return {row["variant"]: row for row in rows}


# ---------- DIRECTIONAL ----------
def run_directional(work_dir, seeds, iterations):
    state_file = os.path.join(work_dir, "directional_state.json")
    jobs = [(key, seed, flags) for seed in seeds for key, flags in VARIANTS.items()]
    state = run_sweep(work_dir, state_file, jobs, iterations)
    if state is None:
        return 1

    summary = summarize(state, list(VARIANTS), os.path.join(work_dir, "directional_summary.csv"))
    base, vanilla, pose = (summary[k]["iou"] for k in ("baseline", "vanilla", "pose"))
    holds = pose >= vanilla >= base and pose - base >= MIN_MARGIN
    logging.info("Mean test IoU: baseline %.4f, vanilla %.4f, pose %.4f", base, vanilla, pose)
    if holds:
        logging.info("Ordering pose >= vanilla >= baseline holds (margin %.4f)", pose - base)
    else:
        logging.warning("Ordering pose >= vanilla >= baseline with margin %.2f does NOT hold", MIN_MARGIN)
    return 0 if holds else 1


# ---------- SENSITIVITY ----------
def run_sensitivity(work_dir, seeds, iterations):
    state_file = os.path.join(work_dir, "sensitivity_state.json")
    keys = [f"delta_{d:g}" for d in DELTA_GRID]
    jobs = [("baseline", seed, VARIANTS["baseline"]) for seed in seeds]
    jobs += [(key, seed, ["--mining", "pose", "--delta", repr(d)]) for seed in seeds for key, d in zip(keys, DELTA_GRID)]
    state = run_sweep(work_dir, state_file, jobs, iterations)
    if state is None:
        return 1
    summarize(state, ["baseline", *keys], os.path.join(work_dir, "sensitivity_summary.csv"))
    return 0


# ---------- REFERENCE ----------
def run_reference(work_dir, seeds, iterations):
    state_file = os.path.join(work_dir, "reference_state.json")
    variants = {"baseline": VARIANTS["baseline"], "pose": VARIANTS["pose"], **REFERENCE_VARIANTS}
    jobs = [(key, seed, flags) for seed in seeds for key, flags in variants.items()]
    state = run_sweep(work_dir, state_file, jobs, iterations)
    if state is None:
        return 1
    summary = summarize(state, list(variants), os.path.join(work_dir, "reference_summary.csv"))
    logging.info("Mean test IoU: %s", ", ".join(f"{k} {summary[k]['iou']:.4f}" for k in variants))
    return 0


# ---------- ENTRY ----------
if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser()
    ap.add_argument("mode", choices=["directional", "sensitivity", "reference"])
    ap.add_argument("--work-dir", default=WORK_DIR)
    ap.add_argument("--seeds", type=int, nargs="+", default=SEEDS)
    ap.add_argument("--iters", type=int, default=ITERATIONS)
    args = ap.parse_args()

    if args.mode == "directional":
        sys.exit(run_directional(args.work_dir, args.seeds, args.iters))
    if args.mode == "reference":
        sys.exit(run_reference(args.work_dir, args.seeds, args.iters))
    sys.exit(run_sensitivity(args.work_dir, args.seeds, args.iters))
