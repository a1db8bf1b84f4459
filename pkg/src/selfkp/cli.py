"""Command-line entry point.

Subcommands: gen, pretrain, label, train, eval, compare. Every command
resolves its configuration (defaults <- preset <- config file <- flags,
rightmost wins), writes a manifest with the resolved config and argv
before doing any work, and finalizes it afterwards; re-running the argv
from a manifest reproduces all outputs byte-for-byte.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure during
training (the last good checkpoint path is printed).
"""

from __future__ import annotations

import argparse
import configparser
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import losses
from . import model as mdl
from . import pipeline as pl
from . import report as rp
from . import synthdata as sd
from .geometry import HomographySampleConfig


class UsageError(Exception):
    pass


# strategy and semantic-head flag for the six trained variants
PRESETS = {
    "sp-uni": ("uni", False), "sp-unc": ("unc", False), "sp-ct": ("ct", False),
    "ssp-uni": ("uni", True), "ssp-unc": ("unc", True), "ssp-ct": ("ct", True),
}


def default_config():
    return {
        "run": {"seed": 0, "workers": 1},
        "model": {"c_enc": 64, "descriptor_dim": 64, "num_classes": 5,
                  "widths": "16,16,32,32", "head_hidden": 128,
                  "with_semantic": True},
        "scene": {"height": 120, "width": 160},
        "train": {"stage": "joint", "iterations": 10000, "batch_size": 16,
                  "lr_kind": "poly", "lr_start": 0.0025, "lr_end": 0.001,
                  "lr_power": 1.0, "checkpoint_interval": 500,
                  "strategy": "uni", "detector_form": "bce",
                  "lambda_desc": 1.0, "m_p": 1.0, "m_n": 0.2,
                  "eta_init": "1.0,2.0,1.0", "alpha": 0.3, "window": 50,
                  "val_pairs": 6},
        "adaptation": {"n_h": 10, "threshold": 0.015, "nms_radius": 4,
                       "top_k": 300},
        "eval": {"top_k": 300, "nms_radius": 4, "detection_threshold": 0.015,
                 "eps_rep": 3.0, "pairs": 20},
    }


def apply_paper_scale(config):
    """Reference-scale settings: full widths, 240x320 images, the full
    iteration budget, and N_h = 100 for labeling."""
    config["model"].update({"c_enc": 256, "descriptor_dim": 256,
                            "widths": "64,64,128,128", "head_hidden": 256})
    config["scene"].update({"height": 240, "width": 320})
    config["train"].update({"iterations": 200000, "checkpoint_interval": 5000})
    config["adaptation"]["n_h"] = 100
    return config


def apply_preset(config, preset):
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    strategy, semantic = PRESETS[preset]
    config["train"]["strategy"] = strategy
    config["model"]["with_semantic"] = semantic
    return config


def _coerce(default, raw):
    if isinstance(default, bool):
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    return type(default)(raw)


def load_config_file(config, path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    for section in parser.sections():
        if section not in config:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in config[section]:
                raise UsageError(f"unknown config key [{section}] {key}")
            try:
                config[section][key] = _coerce(config[section][key], raw)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for [{section}] {key}: {exc}")
    return config


def resolve_config(args):
    """defaults <- preset <- --paper-scale <- config file <- --seed flag."""
    config = default_config()
    if getattr(args, "preset", None):
        apply_preset(config, args.preset)
    if getattr(args, "paper_scale", False):
        apply_paper_scale(config)
    if getattr(args, "config", None):
        load_config_file(config, args.config)
    if getattr(args, "seed", None) is not None:
        config["run"]["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        config["run"]["workers"] = args.workers
    if getattr(args, "iterations", None) is not None:
        config["train"]["iterations"] = args.iterations
    if getattr(args, "strategy", None) is not None:
        config["train"]["strategy"] = args.strategy
    if getattr(args, "n_h", None) is not None:
        config["adaptation"]["n_h"] = args.n_h
    if getattr(args, "pairs", None) is not None:
        config["eval"]["pairs"] = args.pairs
    return config


def _parse_tuple(text, kind=float):
    return tuple(kind(part) for part in str(text).split(","))


def build_model_config(config):
    m = config["model"]
    return mdl.ModelConfig(c_enc=m["c_enc"], descriptor_dim=m["descriptor_dim"],
                           num_classes=m["num_classes"],
                           widths=_parse_tuple(m["widths"], int),
                           head_hidden=m["head_hidden"],
                           with_semantic=m["with_semantic"])


def build_scene_config(config):
    s = config["scene"]
    return sd.SceneConfig(image_shape=(s["height"], s["width"]))


def build_train_config(config, stage):
    t = config["train"]
    scene = build_scene_config(config)
    return pl.TrainConfig(
        stage=stage, iterations=t["iterations"], batch_size=t["batch_size"],
        lr_kind=t["lr_kind"], lr_start=t["lr_start"], lr_end=t["lr_end"],
        lr_power=t["lr_power"], seed=config["run"]["seed"],
        checkpoint_interval=t["checkpoint_interval"], strategy=t["strategy"],
        model=build_model_config(config), detector_form=t["detector_form"],
        hinge=losses.HingeConfig(m_p=t["m_p"], m_n=t["m_n"]),
        weights=losses.LossWeights(descriptor=t["lambda_desc"]),
        eta_init=_parse_tuple(t["eta_init"]),
        ct=losses.CentralDirConfig(alpha=t["alpha"], window=t["window"]),
        val_pairs=t["val_pairs"], scene=scene)


def build_adaptation_config(config):
    a = config["adaptation"]
    scene = build_scene_config(config)
    return pl.AdaptationConfig(
        n_h=a["n_h"], threshold=a["threshold"], nms_radius=a["nms_radius"],
        top_k=a["top_k"],
        homography=HomographySampleConfig(image_shape=scene.image_shape))


def build_eval_config(config):
    e = config["eval"]
    return ev.EvalConfig(top_k=e["top_k"], nms_radius=e["nms_radius"],
                         detection_threshold=e["detection_threshold"],
                         eps_rep=e["eps_rep"])


# ---------------------------------------------------------------------------
# Manifest and config snapshot
# ---------------------------------------------------------------------------

def write_config_snapshot(config, path):
    parser = configparser.ConfigParser()
    for section, values in config.items():
        parser[section] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def manifest_path_for(out):
    """Run directories hold manifest.json; single-file outputs get a
    sibling <name>.manifest.json so several outputs can share a directory."""
    out = Path(out)
    if out.suffix:
        return out.parent / (out.name + ".manifest.json")
    return out / "manifest.json"


def start_manifest(out, command, argv, config, inputs):
    path = manifest_path_for(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "argv": list(argv),
                "config": copy.deepcopy(config), "seed": config["run"]["seed"],
                "version": __version__, "inputs": inputs, "outputs": [],
                "status": "pending",
                "timings": {"started": time.time(), "finished": None,
                            "seconds": None}}
    _dump_manifest(manifest, path)
    return manifest


def finalize_manifest(manifest, out, outputs, status="ok"):
    manifest["outputs"] = [str(p) for p in outputs]
    manifest["status"] = status
    manifest["timings"]["finished"] = time.time()
    manifest["timings"]["seconds"] = \
        manifest["timings"]["finished"] - manifest["timings"]["started"]
    _dump_manifest(manifest, manifest_path_for(out))


def _dump_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_file(path, what):
    if path is None:
        raise UsageError(f"missing required {what}")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args, argv):
    config = resolve_config(args)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(out, "gen", argv, config, [])
    scene = build_scene_config(config)
    samples = sd.make_dataset(scene, args.count, config["run"]["seed"])
    sd.write_dataset(samples, out)
    finalize_manifest(manifest, out, [out])
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_pretrain(args, argv):
    config = resolve_config(args)
    data = _require_file(args.data, "dataset (--data)")
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(run_dir, "pretrain", argv, config, [str(data)])
    write_config_snapshot(config, run_dir / "config.ini")
    dataset = sd.read_dataset(data)
    train_cfg = build_train_config(config, stage="pretrain")
    best = pl.pretrain_detector(train_cfg, dataset, run_dir)
    finalize_manifest(manifest, run_dir, [best])
    print(f"best checkpoint: {best}")
    return 0


def cmd_label(args, argv):
    config = resolve_config(args)
    ckpt = _require_file(args.checkpoint, "checkpoint (--checkpoint)")
    data = _require_file(args.data, "dataset (--data)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(out, "label", argv, config,
                              [str(ckpt), str(data)])
    params = mdl.load_checkpoint(ckpt)
    dataset = sd.read_dataset(data)
    adapt = build_adaptation_config(config)
    labeled = pl.homographic_adaptation_label(params, dataset, adapt,
                                              seed=config["run"]["seed"])
    sd.write_dataset(labeled, out)
    finalize_manifest(manifest, out, [out])
    print(f"wrote pseudo-labels for {len(labeled)} images to {out}")
    return 0


def cmd_train(args, argv):
    config = resolve_config(args)
    data = _require_file(args.data, "labeled dataset (--data)")
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(run_dir, "train", argv, config, [str(data)])
    write_config_snapshot(config, run_dir / "config.ini")
    dataset = sd.read_dataset(data)
    train_cfg = build_train_config(config, stage="joint")
    init_ckpt = args.init_checkpoint
    if init_ckpt is not None:
        init_ckpt = _require_file(init_ckpt, "initial checkpoint")
    if train_cfg.strategy == "ct" and args.warm_checkpoint is None:
        # first half under the uncertainty loss, then restart from the
        # half-way checkpoint with the central-direction combination
        half = max(train_cfg.iterations // 2, train_cfg.checkpoint_interval)
        warm_cfg = copy.deepcopy(train_cfg)
        warm_cfg.strategy = "unc"
        warm_cfg.iterations = half
        pl.joint_train(warm_cfg, dataset, run_dir / "warmup",
                       init_checkpoint=init_ckpt)
        init_ckpt = run_dir / "warmup" / "checkpoints" / f"iter_{half}.sspc"
    elif train_cfg.strategy == "ct":
        init_ckpt = _require_file(args.warm_checkpoint, "warm-start checkpoint")
    best = pl.joint_train(train_cfg, dataset, run_dir, init_checkpoint=init_ckpt)
    finalize_manifest(manifest, run_dir, [best])
    print(f"best checkpoint: {best}")
    return 0


def cmd_eval(args, argv):
    config = resolve_config(args)
    if config["eval"]["pairs"] <= 0:
        raise UsageError("--pairs must be > 0")
    ckpts = [_require_file(c, "checkpoint") for c in args.checkpoints]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(out_dir, "eval", argv, config,
                              [str(c) for c in ckpts])
    scene = build_scene_config(config)
    eval_cfg = build_eval_config(config)
    pairs = ev.make_eval_set(scene, config["eval"]["pairs"],
                             seed=config["run"]["seed"])
    outputs = []
    entries = []
    for ckpt in ckpts:
        try:
            params = mdl.load_checkpoint(ckpt)
        except mdl.CheckpointFormatError as exc:
            raise UsageError(str(exc))
        name = ckpt.stem if ckpt.stem != "best" else ckpt.parent.parent.name
        result = ev.evaluate_model(params, pairs, eval_cfg)
        outputs.append(rp.write_json(result, out_dir / f"{name}.json", name))
        outputs.append(rp.render_pair_figure(result, out_dir / f"{name}.png", name))
        entries.append(rp.report_to_dict(result, name))
    outputs.append(rp.write_csv(entries, out_dir / "report.csv"))
    if len(entries) > 1:
        outputs.append(rp.render_comparison(entries, out_dir / "comparison.png"))
    finalize_manifest(manifest, out_dir, outputs)
    print(f"wrote report for {len(ckpts)} checkpoint(s) to {out_dir}")
    return 0


def cmd_compare(args, argv):
    config = resolve_config(args)
    paths = [_require_file(p, "report") for p in args.reports]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(out_dir, "compare", argv, config,
                              [str(p) for p in paths])
    entries = [rp.load_report(p) for p in paths]
    ranked = pl.select_best([(e, e["aggregate"]) for e in entries])[0]
    order = sorted(entries, key=lambda e: (
        -(e["aggregate"].get("matching_score") if e["aggregate"].get("matching_score")
          is not None else -1.0),
        -(e["aggregate"].get("repeatability") if e["aggregate"].get("repeatability")
          is not None else -1.0),
        e["aggregate"].get("mle") if e["aggregate"].get("mle") is not None
        else float("inf")))
    outputs = [rp.write_csv(order, out_dir / "ranking.csv"),
               rp.render_comparison(order, out_dir / "ranking.png")]
    for i, entry in enumerate(order):
        marker = " <- best" if entry is ranked else ""
        ms = entry["aggregate"].get("matching_score")
        print(f"{i + 1}. {entry['model']}  "
              f"M.S. {'n/a' if ms is None else f'{ms:.4f}'}{marker}")
    finalize_manifest(manifest, out_dir, outputs)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(sub):
    sub.add_argument("--config", help="INI config file")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", required=True, help="output path")
    sub.add_argument("--workers", type=int, default=None)
    sub.add_argument("--preset", choices=sorted(PRESETS), default=None)
    sub.add_argument("--paper-scale", action="store_true",
                     help="reference-scale configuration values")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="selfkp",
        description="Self-supervised keypoint/descriptor training and evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen", help="generate a synthetic-shapes dataset")
    _common(p)
    p.add_argument("--count", type=int, required=True)

    p = subs.add_parser("pretrain", help="detector-only pretraining")
    _common(p)
    p.add_argument("--data", required=True, help="SSPD dataset")
    p.add_argument("--iterations", type=int, default=None)

    p = subs.add_parser("label", help="pseudo-labels by homographic adaptation")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-h", type=int, default=None, dest="n_h")

    p = subs.add_parser("train", help="joint training")
    _common(p)
    p.add_argument("--data", required=True, help="labeled SSPD dataset")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--strategy", choices=("uni", "unc", "ct"), default=None)
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--warm-checkpoint", default=None,
                   help="skip the built-in warm-up phase of the ct strategy")

    p = subs.add_parser("eval", help="evaluate checkpoints")
    _common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--pairs", type=int, default=None)

    p = subs.add_parser("compare", help="rank metric reports")
    _common(p)
    p.add_argument("reports", nargs="+")
    return parser


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "label": cmd_label,
            "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except (UsageError, mdl.ConfigError, sd.DatasetFormatError,
            mdl.CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except pl.NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.last_checkpoint is not None:
            print(f"last checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
