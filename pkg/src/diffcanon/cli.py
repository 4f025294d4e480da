"""Experiment runner: every pipeline stage as a subcommand.

Stages share one output directory and find each other's artifacts there
by fixed file names, so the full recipe is a chain of invocations with
the same --out. Each invocation echoes its resolved configuration next
to the outputs; re-running any stage from that echo reproduces its
artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import canon, config, diffusion, distill, toydata
from .errors import (ConfigError, ContractError, DegenerateInputError,
                     InvalidInputError, NumericalError, TrainingDivergedError)
from .rng import Rng

DATA_CSV = "toy_data.csv"
CDM_CKPT = "cdm_checkpoint.json"
CDM_LOSS = "cdm_loss.csv"
TE_REPORT = "te_report.json"
TE_CURVE = "te_curve.csv"
BUNDLES = "bundles.jsonl"
BEFORE_AFTER = "before_after.csv"
FEATURES_REPORT = "features_report.json"
POOL_FILE = "pool.jsonl"
SUMMARY = "summary.csv"


def _schedule(cfg: dict) -> diffusion.NoiseSchedule:
    return diffusion.linear_schedule(
        t_max=cfg["schedule.t_max"], beta_start=cfg["schedule.beta_start"],
        beta_end=cfg["schedule.beta_end"], ddim_eta=cfg["schedule.ddim_eta"],
        ddim_steps=cfg["schedule.ddim_steps"])


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{hint} not found at {path}; run the producing stage first")
    return path


def _chosen_te(cfg: dict, out: str) -> int:
    if cfg["clarid.t_e"] > 0:
        return cfg["clarid.t_e"]
    with open(_require(os.path.join(out, TE_REPORT), "saturation report")) as f:
        return int(json.load(f)["chosen"])


def _write_json(payload: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _select_indices(ys: np.ndarray, cfg: dict) -> np.ndarray:
    idx = np.arange(len(ys))
    if cfg["clarid.class_filter"] >= 0:
        idx = idx[ys == cfg["clarid.class_filter"]]
    return idx[:cfg["clarid.n_samples"]]


def cmd_gen_data(cfg: dict, out: str) -> None:
    rng = Rng(cfg["seed"]).split("data")
    dataset = toydata.sample_dataset(cfg["data.n"], rng)
    toydata.save_csv(dataset, os.path.join(out, DATA_CSV))


def cmd_train_cdm(cfg: dict, out: str) -> None:
    dataset = toydata.load_csv(_require(os.path.join(out, DATA_CSV), "toy data"))
    sched = _schedule(cfg)
    tc = diffusion.TrainConfig(epochs=cfg["cdm.epochs"], batch_size=cfg["cdm.batch_size"],
                               lr=cfg["cdm.lr"], label_drop=cfg["cdm.label_drop"],
                               weight_decay=cfg["cdm.weight_decay"], seed=cfg["seed"])
    model, losses = diffusion.train_cdm(dataset, sched, tc, Rng(cfg["seed"]).split("cdm"))
    diffusion.save_checkpoint(model, os.path.join(out, CDM_CKPT))
    with open(os.path.join(out, CDM_LOSS), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, f"{loss:.6f}"])


def cmd_find_te(cfg: dict, out: str) -> None:
    model = diffusion.load_checkpoint(_require(os.path.join(out, CDM_CKPT), "denoiser checkpoint"))
    sched = _schedule(cfg)
    grid = config.grid_from_config(cfg)
    report = canon.find_te(model, sched, toydata.bayes_rule, grid, cfg["te.m"],
                           Rng(cfg["seed"]).split("te"), tol=cfg["te.tol"])
    _write_json({"grid": report.grid, "accuracies": report.accuracies,
                 "chosen": report.chosen, "tol": report.tol},
                os.path.join(out, TE_REPORT))
    with open(os.path.join(out, TE_CURVE), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_e", "accuracy"])
        for t, a in zip(report.grid, report.accuracies):
            w.writerow([t, f"{a:.6f}"])


def cmd_clarid(cfg: dict, out: str) -> None:
    model = diffusion.load_checkpoint(_require(os.path.join(out, CDM_CKPT), "denoiser checkpoint"))
    dataset = toydata.load_csv(_require(os.path.join(out, DATA_CSV), "toy data"))
    sched = _schedule(cfg)
    t_e = _chosen_te(cfg, out)
    xs, ys = dataset.xs(), dataset.ys()
    idx = _select_indices(ys, cfg)
    sel_x, sel_y = xs[idx], ys[idx]
    bundles = canon.canonicalize_batch(sel_x, sel_y, model, sched, t_e,
                                       n=cfg["clarid.n_directions"],
                                       cfg_scale=cfg["clarid.cfg_scale"],
                                       t_r=cfg["clarid.t_r"], layer=cfg["clarid.layer"])
    for b, i in zip(bundles, idx):
        b.seed_sample_id = int(i)
    canon.save_bundles(bundles, os.path.join(out, BUNDLES))
    baseline = canon.plain_roundtrip(sel_x, sel_y, model, sched, t_e,
                                     cfg_scale=cfg["clarid.cfg_scale"])
    with open(os.path.join(out, BEFORE_AFTER), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "label", "orig_x1", "orig_x2", "base_x1", "base_x2",
                    "canon_x1", "canon_x2", "k", "dist_orig", "dist_base", "dist_canon"])
        for j, b in enumerate(bundles):
            o, bl, cn = sel_x[j], baseline[j], b.canonical_sample
            y = int(sel_y[j])
            w.writerow([b.seed_sample_id, y,
                        f"{o[0]:.6f}", f"{o[1]:.6f}", f"{bl[0]:.6f}", f"{bl[1]:.6f}",
                        f"{cn[0]:.6f}", f"{cn[1]:.6f}", b.k,
                        f"{toydata.distance_to_core_segment(o, y):.6f}",
                        f"{toydata.distance_to_core_segment(bl, y):.6f}",
                        f"{toydata.distance_to_core_segment(cn, y):.6f}"])


def cmd_eval_features(cfg: dict, out: str) -> None:
    model = diffusion.load_checkpoint(_require(os.path.join(out, CDM_CKPT), "denoiser checkpoint"))
    dataset = toydata.load_csv(_require(os.path.join(out, DATA_CSV), "toy data"))
    bundles = canon.load_bundles(_require(os.path.join(out, BUNDLES), "bundle file"))
    sched = _schedule(cfg)
    t_r = cfg["clarid.t_r"]
    layer = cfg["clarid.layer"]
    canon_feats = np.stack([b.canonical_feature for b in bundles])
    labels = np.array([b.cond for b in bundles], dtype=np.int64)
    ids = np.array([b.seed_sample_id for b in bundles])
    orig_x = dataset.xs()[ids]
    orig_latents = diffusion.invert_batch(orig_x, t_r, labels, model, sched)
    orig_feats = model.hidden(orig_latents, t_r, labels, layer)
    k = len(np.unique(labels))
    rng = Rng(cfg["seed"])
    payload = {}
    if k >= 2:
        q_canon = canon.feature_quality(canon_feats, labels, k, rng.split("fq-canon"))
        q_orig = canon.feature_quality(orig_feats, labels, k, rng.split("fq-orig"))
        payload.update({
            "nmi_canonical": q_canon.nmi, "nmi_original": q_orig.nmi,
            "within_class_var_canonical": {str(c): v for c, v in q_canon.within_class_var.items()},
            "within_class_var_original": {str(c): v for c, v in q_orig.within_class_var.items()},
        })
    else:
        # single-class bundles: no clustering, variance comparison only
        payload.update({
            "within_class_var_canonical": {str(int(labels[0])): float(np.mean(
                np.sum((canon_feats - canon_feats.mean(axis=0)) ** 2, axis=1)))},
            "within_class_var_original": {str(int(labels[0])): float(np.mean(
                np.sum((orig_feats - orig_feats.mean(axis=0)) ** 2, axis=1)))},
        })
    _write_json(payload, os.path.join(out, FEATURES_REPORT))


def cmd_build_pool(cfg: dict, out: str) -> None:
    model = diffusion.load_checkpoint(_require(os.path.join(out, CDM_CKPT), "denoiser checkpoint"))
    dataset = toydata.load_csv(_require(os.path.join(out, DATA_CSV), "toy data"))
    sched = _schedule(cfg)
    t_e = _chosen_te(cfg, out)
    xs, ys = dataset.xs(), dataset.ys()
    rng = Rng(cfg["seed"]).split("pool-select")
    picked = []
    for c in np.unique(ys):
        members = np.flatnonzero(ys == c)
        count = max(1, round(cfg["pool.fraction"] * len(members)))
        order = rng.permutation(len(members))
        picked.extend(members[order[:count]].tolist())
    picked = sorted(picked)
    bundles = canon.canonicalize_batch(xs[picked], ys[picked], model, sched, t_e,
                                       n=cfg["clarid.n_directions"],
                                       cfg_scale=cfg["clarid.cfg_scale"],
                                       t_r=cfg["clarid.t_r"], layer=cfg["clarid.layer"])
    for b, i in zip(bundles, picked):
        b.seed_sample_id = int(i)
    canon.save_bundles(bundles, os.path.join(out, POOL_FILE))


def cmd_train_student(cfg: dict, out: str) -> None:
    dataset = toydata.load_csv(_require(os.path.join(out, DATA_CSV), "toy data"))
    vanilla = cfg["student.vanilla"]
    pool = None
    if not vanilla:
        bundles = canon.load_bundles(_require(os.path.join(out, POOL_FILE), "pool file"))
        pool = distill.ClaRepPool.from_bundles(bundles)
    dc = distill.DistillConfig(
        tau=cfg["student.tau"], lambda_cs=cfg["student.lambda_cs"],
        lambda_cf=cfg["student.lambda_cf"], lambda_dist=cfg["student.lambda_dist"],
        lambda_cka=cfg["student.lambda_cka"], epochs=cfg["student.epochs"],
        batch_size=cfg["student.batch_size"], lr=cfg["student.lr"],
        optimizer=cfg["student.optimizer"], momentum=cfg["student.momentum"],
        seed=cfg["seed"])
    student, log = distill.train_student(dataset, pool, dc, Rng(cfg["seed"]).split("student"))
    prefix = "vanilla" if vanilla else "student"
    distill.save_student(student, os.path.join(out, f"{prefix}_checkpoint.json"))
    with open(os.path.join(out, f"{prefix}_loss.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "total", "cls", "align", "cluster", "cka"])
        for i, row in enumerate(log):
            w.writerow([i] + [f"{row[k]:.6f}" for k in ("total", "cls", "align", "cluster", "cka")])


def cmd_attack(cfg: dict, out: str) -> None:
    target = cfg["attack.target"]
    if target not in ("student", "vanilla"):
        raise ConfigError(f"attack.target must be student or vanilla, got {target!r}")
    student = distill.load_student(
        _require(os.path.join(out, f"{target}_checkpoint.json"), f"{target} checkpoint"))
    eval_data = toydata.sample_dataset(cfg["eval.n"], Rng(cfg["seed"]).split("eval-data"))
    atk = distill.AttackConfig(epsilon=cfg["attack.epsilon"], steps=cfg["attack.steps"],
                               step_size=cfg["attack.step_size"], norm=cfg["attack.norm"])
    report = distill.evaluate(student, eval_data, atk, Rng(cfg["seed"]).split("attack"))
    _write_json({"target": target, "clean_accuracy": report.clean_accuracy,
                 "robust_accuracy": report.robust_accuracy,
                 "attack": {"epsilon": atk.epsilon, "steps": atk.steps,
                            "step_size": atk.step_size, "norm": atk.norm}},
                os.path.join(out, f"metrics_{target}.json"))


def cmd_report(cfg: dict, out: str) -> None:
    rows: list[tuple[str, str]] = []

    def add(name: str, value) -> None:
        rows.append((name, f"{value:.6f}" if isinstance(value, float) else str(value)))

    te_path = os.path.join(out, TE_REPORT)
    if os.path.exists(te_path):
        with open(te_path) as f:
            te = json.load(f)
        add("te_chosen", te["chosen"])
        add("te_max_accuracy", float(max(te["accuracies"])))
    feat_path = os.path.join(out, FEATURES_REPORT)
    if os.path.exists(feat_path):
        with open(feat_path) as f:
            feat = json.load(f)
        for key in ("nmi_canonical", "nmi_original"):
            if key in feat:
                add(key, float(feat[key]))
        for kind in ("canonical", "original"):
            for c, v in sorted(feat.get(f"within_class_var_{kind}", {}).items()):
                add(f"var_{kind}_class{c}", float(v))
    for target in ("student", "vanilla"):
        m_path = os.path.join(out, f"metrics_{target}.json")
        if os.path.exists(m_path):
            with open(m_path) as f:
                m = json.load(f)
            add(f"{target}_clean_accuracy", float(m["clean_accuracy"]))
            if m.get("robust_accuracy") is not None:
                add(f"{target}_robust_accuracy", float(m["robust_accuracy"]))
    ba_path = os.path.join(out, BEFORE_AFTER)
    if os.path.exists(ba_path):
        with open(ba_path, newline="") as f:
            r = list(csv.DictReader(f))
        if r:
            add("median_dist_canonical", float(np.median([float(x["dist_canon"]) for x in r])))
            add("median_dist_baseline", float(np.median([float(x["dist_base"]) for x in r])))
    if not rows:
        raise FileNotFoundError("no stage artifacts found to summarize; run earlier stages first")
    with open(os.path.join(out, SUMMARY), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerows(rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cdm": cmd_train_cdm,
    "find-te": cmd_find_te,
    "clarid": cmd_clarid,
    "eval-features": cmd_eval_features,
    "build-pool": cmd_build_pool,
    "train-student": cmd_train_student,
    "attack": cmd_attack,
    "report": cmd_report,
}

ERROR_CODES = {
    ConfigError: "CONFIG_ERROR",
    InvalidInputError: "INVALID_INPUT",
    DegenerateInputError: "DEGENERATE_INPUT",
    ContractError: "CONTRACT_ERROR",
    NumericalError: "NUMERICAL_ERROR",
    TrainingDivergedError: "TRAINING_DIVERGED",
    FileNotFoundError: "MISSING_ARTIFACT",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffcanon",
                                     description="toy diffusion canonicalization lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file (flat keys)")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--threads", type=int, default=None,
                       help="worker count (results are bit-identical for any value)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = config.parse_set_args(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if args.threads is not None:
            overrides["threads"] = args.threads
        cfg = config.resolve(args.config, overrides)
        out = cfg["out"]
        os.makedirs(out, exist_ok=True)
        # train-student/attack run once per variant; keep one echo per variant
        # so any artifact can be reproduced from its own echoed config.
        echo = args.command
        if args.command == "train-student":
            echo += ".vanilla" if cfg["student.vanilla"] else ".distill"
        elif args.command == "attack":
            echo += f".{cfg['attack.target']}"
        config.write_resolved(cfg, out, name=f"resolved_config.{echo}.json")
        COMMANDS[args.command](cfg, out)
    except tuple(ERROR_CODES) as exc:
        code = next(c for t, c in ERROR_CODES.items() if isinstance(exc, t))
        print(f"error code={code} command={args.command} detail={exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error code=UNKNOWN command={args.command} detail={exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
