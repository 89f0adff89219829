"""Command-line entry points: gen-data, train, eval, detect, gradcheck, ablate.

Every command takes ``--config``, ``--out``, ``--seed`` and repeatable
``--set key=value``.  Artifacts land under ``--out`` with fixed names.
Exit status is 0 on success, 1 for bad input or configuration and 2 when
training or a gradient check fails numerically.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as config_mod
from . import tensor as tn
from .backbone import NetworkConfig, load_checkpoint, save_checkpoint
from .detector import build_detector, detect, write_detection_manifest
from .errors import ConfigError, InputError, NumericalError
from .gradcheck import run_all
from .metrics import (classification_report, mean_ap, per_class_ap, write_ap_csv,
                      write_confusion_csv)
from .network import build_model
from .sampler import StrideTriple
from .tensorfile import TensorFileError
from .trainer import (LabeledClips, accuracy, gen_detection, gen_synthetic, infer, predict_logits,
                      read_dataset, train, train_detector, write_dataset, write_epoch_csv)

log = logging.getLogger("tristream")

COMMANDS = ("gen-data", "train", "eval", "detect", "gradcheck", "ablate")
ABLATION_FIELDS = ["factor", "theta1", "theta2", "theta3", "head", "beta", "top1",
                   "macs_single", "macs_slow", "macs_fast", "macs_lateral", "macs_total"]


@dataclass
class RunSpec:
    command: str
    out: Path
    config_path: Optional[str] = None
    seed: Optional[int] = None
    overrides: list = field(default_factory=list)

    def load(self) -> dict:
        cfg = config_mod.load(self.config_path, self.overrides, self.seed)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {self.out} is not writable: {exc}") from exc
        return cfg


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def synthetic_splits(cfg: dict) -> tuple[LabeledClips, LabeledClips]:
    """Train and test sets, drawn in that order from one generator seeded by ``seed``."""
    spec = config_mod.synthetic_spec(cfg)
    rng = np.random.default_rng(cfg["seed"])
    train_set = gen_synthetic(spec, cfg["data.num_train"], rng)
    test_set = gen_synthetic(spec, cfg["data.num_test"], rng)
    return train_set, test_set


def load_split(cfg: dict, split: str) -> LabeledClips:
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    if cfg["data.dir"]:
        return read_dataset(Path(cfg["data.dir"]) / f"{split}.tsv")
    train_set, test_set = synthetic_splits(cfg)
    return train_set if split == "train" else test_set


def _check_data(cfg: dict, data: LabeledClips) -> None:
    _, T, H, W, C = data.frames.shape
    if T != cfg["data.frames"] or C != cfg["data.channels"]:
        raise InputError(f"clips are {T} frames x {C} channels but the config expects "
                         f"{cfg['data.frames']} x {cfg['data.channels']}")
    if data.labels.max() >= cfg["data.num_classes"]:
        raise InputError(f"label {data.labels.max()} outside {cfg['data.num_classes']} classes")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(spec: RunSpec) -> int:
    cfg = spec.load()
    train_set, test_set = synthetic_splits(cfg)
    write_dataset(train_set, spec.out, "train")
    write_dataset(test_set, spec.out, "test")
    (spec.out / "config.txt").write_text(config_mod.dumps(cfg))
    log.info("wrote %d train / %d test clips to %s", len(train_set), len(test_set), spec.out)
    return 0


def _checkpoint_config(cfg: dict, net: NetworkConfig) -> dict:
    return {"run": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
            "network": net.to_dict()}


def _restore_model(path):
    state, stored = load_checkpoint(path)
    if "network" not in stored:
        raise InputError(f"{path}: checkpoint carries no network configuration")
    net = NetworkConfig.from_dict(stored["network"])
    model = build_model(net)
    model.load_state_dict(state)
    return model, net


def cmd_train(spec: RunSpec) -> int:
    cfg = spec.load()
    data = load_split(cfg, "train")
    _check_data(cfg, data)
    net = config_mod.network_config(cfg)
    tcfg = config_mod.train_config(cfg)
    model = build_model(net, cfg["seed"], tcfg.dropout_p)
    (spec.out / "config.txt").write_text(config_mod.dumps(cfg))
    history = []
    try:
        history = train(model, data.frames, data.labels, tcfg, spec.out / "checkpoint",
                        _checkpoint_config(cfg, net))
    finally:
        if history:
            write_epoch_csv(spec.out / "epochs.csv", history)
    return 0


def cmd_eval(spec: RunSpec) -> int:
    cfg = spec.load()
    ckpt = cfg["eval.checkpoint"] or str(spec.out / "checkpoint")
    model, net = _restore_model(ckpt)
    data = load_split(cfg, cfg["eval.split"])
    if data.frames.shape[1] < net.clip_len:
        raise InputError(f"clips have {data.frames.shape[1]} frames, the model needs {net.clip_len}")
    if cfg["eval.n_clips"] > 1:
        logits = np.stack([np.log(infer(model, data.clip(i), cfg["eval.n_clips"])) for i in range(len(data))])
    else:
        logits = predict_logits(model, data.frames[:, :net.clip_len])
    report = classification_report(logits, data.labels, net.num_classes)
    (spec.out / "metrics.json").write_text(report.to_json())
    write_confusion_csv(spec.out / "confusion.csv", report.confusion)
    log.info("%s split: top1 %.4f top5 %.4f", cfg["eval.split"], report.top1, report.top5)
    return 0


def cmd_detect(spec: RunSpec) -> int:
    """Train (or load) the box classifier on synthetic two-box clips and score its training split."""
    cfg = spec.load()
    sspec = config_mod.synthetic_spec(cfg)
    data = gen_detection(sspec, cfg["detect.num_train"], np.random.default_rng(cfg["seed"]))
    net = config_mod.network_config(cfg)
    if cfg["detect.checkpoint"]:
        state, _ = load_checkpoint(cfg["detect.checkpoint"])
        model = build_detector(net, cfg["seed"], cfg["detect.roi_size"])
        model.load_state_dict(state)
    else:
        tcfg = config_mod.train_config(cfg, lr=cfg["detect.lr"], epochs=cfg["detect.epochs"],
                                       batch_size=cfg["detect.batch_size"], dropout_p=0.0)
        model = build_detector(net, cfg["seed"], cfg["detect.roi_size"])
        try:
            history = train_detector(model, data, tcfg)
        except NumericalError:
            save_checkpoint(model, _checkpoint_config(cfg, net), spec.out / "checkpoint")
            raise
        write_epoch_csv(spec.out / "epochs.csv", history)
        save_checkpoint(model, _checkpoint_config(cfg, net), spec.out / "checkpoint")
    dets, gts = [], []
    for i, boxes in enumerate(data.boxes):
        dets.extend(detect(data.frames[i], boxes, model))
        gts.extend(boxes)
    K = net.num_classes
    aps = per_class_ap(dets, gts, K)
    report = {"map": mean_ap(dets, gts, K), "per_class_ap": aps, "num_boxes": len(gts)}
    write_detection_manifest(spec.out / "detections.csv", dets)
    write_ap_csv(spec.out / "ap_per_class.csv", aps)
    (spec.out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("mAP@0.5 on %d training boxes: %s", len(gts), report["map"])
    return 0


def cmd_gradcheck(spec: RunSpec) -> int:
    cfg = spec.load()
    results = run_all(cfg["gradcheck.instances"], cfg["seed"])
    with open(spec.out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["op", "instances", "max_rel_error", "tolerance", "passed"])
        for r in results:
            w.writerow([r.op, r.instances, f"{r.max_error:.3e}", f"{r.tolerance:.0e}", int(r.passed)])
    for r in results:
        print(f"{r.op:24s} {r.max_error:9.2e}  {'ok' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 2


def ablation_grid(cfg: dict) -> list[tuple[str, NetworkConfig]]:
    """One-factor-at-a-time sweep around the base (θ2, head, β) setting."""
    t1, t3 = cfg["ablate.theta1"], cfg["ablate.theta3"]
    for t2 in (*cfg["ablate.theta2"], cfg["ablate.base_theta2"]):
        if not t3 < t2 < t1:
            raise ConfigError(f"ablation needs theta3 < theta2 < theta1, got theta2={t2} with "
                              f"theta1={t1}, theta3={t3}")
    base = dict(theta2=cfg["ablate.base_theta2"], head=cfg["ablate.base_head"], beta=cfg["ablate.base_beta"])
    plan = [("theta2", dict(base, theta2=v)) for v in cfg["ablate.theta2"]]
    plan += [("head", dict(base, head=v)) for v in cfg["ablate.heads"]]
    plan += [("beta", dict(base, beta=v)) for v in cfg["ablate.betas"]]
    grid = []
    for factor, s in plan:
        net = config_mod.network_config(
            cfg, strides=StrideTriple(t1, s["theta2"], t3), clip_len=cfg["ablate.clip_len"],
            head=s["head"], beta=s["beta"],
        )
        grid.append((factor, net))
    return grid


def ablation_data(cfg: dict) -> tuple[LabeledClips, LabeledClips]:
    """Motion clips at ``data.frames`` steps, each frame held so the clip spans ``ablate.clip_len``."""
    L, T = cfg["ablate.clip_len"], cfg["data.frames"]
    if L % T:
        raise ConfigError(f"ablate.clip_len {L} must be a multiple of data.frames {T}")
    small = dict(cfg, **{"data.size": cfg["ablate.size"], "data.num_train": cfg["ablate.num_train"],
                         "data.num_test": cfg["ablate.num_test"]})
    out = []
    for d in synthetic_splits(small):
        out.append(LabeledClips(np.repeat(d.frames, L // T, axis=1), d.labels, d.fps))
    return out[0], out[1]


def cmd_ablate(spec: RunSpec) -> int:
    cfg = spec.load()
    grid = ablation_grid(cfg)
    train_set, test_set = ablation_data(cfg)
    size = cfg["ablate.size"]
    tcfg = config_mod.train_config(cfg, epochs=cfg["ablate.epochs"])
    rows = []
    for factor, net in grid:
        model = build_model(net, cfg["seed"], tcfg.dropout_p)
        train(model, train_set.frames, train_set.labels, tcfg)
        macs = model.backbone.macs(size, size)
        row = {
            "factor": factor, "theta1": net.strides.theta1, "theta2": net.strides.theta2,
            "theta3": net.strides.theta3, "head": net.head, "beta": net.beta,
            "top1": f"{accuracy(model, test_set.frames, test_set.labels):.4f}",
            **{f"macs_{k}": macs.get(k, 0) for k in ("single", "slow", "fast", "lateral")},
            "macs_total": sum(macs.values()),
        }
        rows.append(row)
        log.info("%s theta2=%d head=%s beta=%g top1=%s", factor, row["theta2"], row["head"], row["beta"], row["top1"])
    with open(spec.out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
    "detect": cmd_detect, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tristream", description="Three-pathway video network experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(spec: RunSpec) -> int:
    """Run one command and map failures to exit codes."""
    try:
        return HANDLERS[spec.command](spec)
    except (NumericalError, tn.NonFiniteError) as exc:
        log.error("numerical failure: %s", exc)
        return 2
    except (ConfigError, InputError, TensorFileError, tn.ShapeError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    spec = RunSpec(args.command, Path(args.out), args.config, args.seed, list(args.overrides))
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
