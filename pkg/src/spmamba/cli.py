"""``spmamba`` command line: data generation, training, evaluation, gradient checks,
ablation sweeps and feature-map dumps.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines) and
repeated ``--set key=value`` overrides.  Precedence, lowest first: built-in
defaults, config file, command-line flags, ``--set``.  Unknown keys are
rejected.  The effective settings are written to ``config.resolved.txt`` in
the output directory.

Exit codes: 0 success, 1 check or evaluation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks
from . import data as D
from . import tensor as T
from .errors import ConfigError, DimensionError, EvaluationError, LoadError, SPMambaError, UsageError
from .metrics import mean_ap, read_detections_csv, write_detections_csv, write_metrics_csv, write_pr_csv
from .model import ABLATION_GROUPS, LEVELS, ModelConfig, build_model
from .tensor import Tensor
from .train import (EVAL_CONF, NMS_IOU, TrainConfig, evaluate, ground_truths, load_checkpoint, predict, train)

_INTERNAL = {"command", "config", "overrides", "func"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------

def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _convert(action: argparse.Action, key: str, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
        v = value.strip().lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if action.choices is not None and value not in [str(c) for c in action.choices]:
        raise ConfigError(f"{key}: {value!r} not one of {list(action.choices)}")
    try:
        return action.type(value) if action.type else value
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def _settable(sub: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    return {a.dest: a for a in sub._actions if a.dest not in _INTERNAL and a.dest != "help"}


def resolve_args(parser: argparse.ArgumentParser, subparsers: dict[str, argparse.ArgumentParser],
                 argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    sub = subparsers[args.command]
    actions = _settable(sub)
    file_vals = read_config_file(args.config) if args.config else {}
    over_vals = {}
    for item in args.overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over_vals[k.strip().replace("-", "_")] = v.strip()
    for k in list(file_vals) + list(over_vals):
        if k not in actions:
            raise ConfigError(f"unknown configuration key {k!r} for '{args.command}'")
    if file_vals:
        sub.set_defaults(**{k: _convert(actions[k], k, v) for k, v in file_vals.items()})
        args = parser.parse_args(argv)
    for k, v in over_vals.items():
        setattr(args, k, _convert(actions[k], k, v))
    return args


def resolved_text(args: argparse.Namespace) -> str:
    items = sorted((k, v) for k, v in vars(args).items() if k not in _INTERNAL)
    lines = [f"command = {args.command}"] + [f"{k} = {'' if v is None else v}" for k, v in items]
    return "\n".join(lines) + "\n"


def write_resolved(args: argparse.Namespace, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(resolved_text(args))


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(text: str | None) -> list[str]:
    return [t.strip() for t in str(text or "").split(",") if t.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be at least 1, got {args.n}")
    spec = D.spec_for(args.difficulty, args.size, args.seed)
    out = D.generate(spec, args.n, args.out)
    write_resolved(args, out)
    print(f"wrote {args.n} images ({args.difficulty}, {args.size}x{args.size}, seed {args.seed}) to {out}")
    return 0


def _load_split(path: str, what: str):
    if not Path(path).is_dir():
        raise UsageError(f"{what} directory {path!r} does not exist")
    images, targets = D.load_arrays(path)
    if len(images) == 0:
        raise UsageError(f"{what} directory {path!r} holds no images")
    return images, targets


def _model_config(args, input_size: int) -> ModelConfig:
    mamba, psa, spp = args.mamba, args.psa, args.sppelan
    if args.group is not None:
        if args.group not in ABLATION_GROUPS:
            raise ConfigError(f"--group must be 1..7, got {args.group}")
        mamba, psa, spp = ABLATION_GROUPS[args.group]
    return ModelConfig(enable_mamba=mamba, enable_psa=psa, enable_sppelan=spp, width=args.width,
                       psa_level=args.psa_level, state_dim=args.state_dim, input_size=input_size)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                       warmup_epochs=args.warmup_epochs, final_lr_ratio=args.final_lr_ratio,
                       grad_clip=args.grad_clip, hflip=args.hflip, eval_every=args.eval_every)


def cmd_train(args) -> int:
    images, targets = _load_split(args.data, "training data")
    val = _load_split(args.val_data, "validation data") if args.val_data else None
    size = images.shape[2]
    if images.shape[2] != images.shape[3] or size % 32:
        raise DimensionError(f"training images must be square with side divisible by 32, got {images.shape[2:]}")
    mcfg = _model_config(args, size)
    tcfg = _train_config(args)
    write_resolved(args, args.out)
    print(f"lr={tcfg.lr:g} momentum={tcfg.momentum:g} weight_decay={tcfg.weight_decay:g} batch={tcfg.batch_size}")
    print(f"model: mamba={mcfg.enable_mamba} psa={mcfg.enable_psa} sppelan={mcfg.enable_sppelan} "
          f"width={mcfg.width} params={build_model(mcfg, tcfg.seed).num_parameters()}")
    print(",".join(["epoch", "loss_box", "loss_obj", "loss_cls", "map50", "map5095"]))
    train(mcfg, tcfg, images, targets, args.out, val=val, resume=args.resume, stop_after=args.stop_after,
          progress=print)
    print(f"checkpoints written to {args.out}")
    return 0


def _write_eval(out: Path, result, num_classes: int) -> None:
    write_metrics_csv(out / "metrics.csv", result, list(D.CLASS_NAMES) if num_classes == len(D.CLASS_NAMES) else None)
    for c in range(num_classes):
        write_pr_csv(out / f"pr_curve_class{c}.csv", result.curves[c])


def cmd_eval(args) -> int:
    if not args.data:
        raise UsageError("eval needs --data (ground truth)")
    if not args.ckpt and not args.dets_csv:
        raise UsageError("eval needs --ckpt or --dets-csv")
    images, targets = _load_split(args.data, "evaluation data")
    ids = D.dataset_stems(args.data)
    out = Path(args.out)
    write_resolved(args, out)
    if args.dets_csv:
        dets = read_detections_csv(args.dets_csv)
        num_classes = args.num_classes
    else:
        if not Path(args.ckpt).is_file():
            raise UsageError(f"checkpoint {args.ckpt!r} not found")
        model, _, _ = load_checkpoint(args.ckpt)
        num_classes = model.cfg.num_classes
        dets = predict(model, images, args.conf, args.iou, ids)
        write_detections_csv(out / "detections.csv", dets)
    result = mean_ap(dets, ground_truths(targets, images.shape[2:], ids), num_classes)
    _write_eval(out, result, num_classes)
    for m in result.per_class:
        ap = "n/a" if m.ap50 is None else f"{m.ap50:.4f}"
        print(f"class {m.class_id}: n_gt={m.n_gt} AP50={ap}")
    print(f"P={result.precision:.4f} R={result.recall:.4f} mAP50={result.map50:.4f} mAP50-95={result.map5095:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    names = _name_list(args.blocks) or list(checks.CHECKS)
    unknown = [n for n in names if n not in checks.CHECKS]
    if unknown:
        raise UsageError(f"unknown check(s) {unknown}; available: {', '.join(checks.CHECKS)}")
    if args.list:
        for n in names:
            tol = checks.MODEL_TOL if n == "model" else checks.BLOCK_TOL
            print(f"{n}\ttol={tol:g}")
        return 0
    faults = _name_list(args.inject_fault)
    seeds = range(args.seed, args.seed + args.seeds)
    results = checks.run_suite(names, seeds, faults, args.h)
    failed = False
    rows = []
    for n in names:
        mine = [r for r in results if r.name == n]
        worst = max(r.report.max_rel_error for r in mine)
        ok = all(r.report.passed for r in mine)
        failed |= not ok
        rows.append((n, worst, mine[0].report.tol, ok))
        print(f"{n:10s} max_rel_err={worst:.3e} tol={mine[0].report.tol:g} {'PASS' if ok else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        write_resolved(args, out)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block", "max_rel_err", "tol", "passed"])
            for n, worst, tol, ok in rows:
                w.writerow([n, f"{worst:.6e}", tol, int(ok)])
    return 1 if failed else 0


ABLATION_HEADER = ["group", "mamba", "psa", "sppelan", "seed", "P", "R", "map50", "map5095", "params"]


def _ablation_run(job) -> list[str]:
    group, seed, data, val_data, out, mkw, tkw = job
    images, targets = D.load_arrays(data)
    val = D.load_arrays(val_data) if val_data else (images, targets)
    m, p, s = ABLATION_GROUPS[group]
    mcfg = ModelConfig(enable_mamba=m, enable_psa=p, enable_sppelan=s, input_size=images.shape[2], **mkw)
    tcfg = TrainConfig(seed=seed, **tkw)
    run_dir = Path(out) / f"group{group}_seed{seed}"
    train(mcfg, tcfg, images, targets, run_dir, val=val)
    model, _, _ = load_checkpoint(run_dir / "best.ckpt")
    res, _ = evaluate(model, *val)
    return [str(group), str(int(m)), str(int(p)), str(int(s)), str(seed), f"{res.precision:.6f}",
            f"{res.recall:.6f}", f"{res.map50:.6f}", f"{res.map5095:.6f}", str(model.num_parameters())]


def worker_count() -> int:
    raw = os.environ.get("SPMAMBA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SPMAMBA_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def cmd_ablate(args) -> int:
    _load_split(args.data, "training data")
    if args.val_data:
        _load_split(args.val_data, "validation data")
    groups = _int_list(args.groups)
    seeds = _int_list(args.seeds)
    if any(g not in ABLATION_GROUPS for g in groups) or not groups or not seeds:
        raise UsageError("groups must be drawn from 1..7 and at least one seed is needed")
    out = Path(args.out)
    write_resolved(args, out)
    mkw = {"width": args.width, "psa_level": args.psa_level, "state_dim": args.state_dim}
    tkw = {"lr": args.lr, "momentum": args.momentum, "weight_decay": args.weight_decay, "batch_size": args.batch,
           "epochs": args.epochs, "eval_every": max(1, args.epochs)}
    jobs = [(g, s, args.data, args.val_data, str(out), mkw, tkw) for g in groups for s in seeds]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_ablation_run, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_ablation_run(job))
            print(",".join(rows[-1]), flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        w.writerows(rows)
        for g in groups:
            mine = [r for r in rows if r[0] == str(g)]
            med = [f"{float(np.median([float(r[i]) for r in mine])):.6f}" for i in range(5, 9)]
            w.writerow(mine[0][:4] + ["median"] + med + [mine[0][9]])
    print(f"ablation table written to {out / 'ablation.csv'}")
    return 0


def feature_mosaic(feat: np.ndarray) -> np.ndarray:
    """(C, h, w) feature map -> gray uint8 mosaic, each channel min-max scaled on its own.

    Constant channels, which have no range to stretch, render as mid-gray 128.
    Tiles fill a near-square grid in channel order; unused slots stay black.
    """
    c, h, w = feat.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    mosaic = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for k in range(c):
        f = feat[k]
        lo, hi = f.min(), f.max()
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            tile = np.full((h, w), 128, dtype=np.uint8)
        else:
            tile = np.rint((f - lo) / (hi - lo) * 255).astype(np.uint8)
        r, q = divmod(k, cols)
        mosaic[r * h:(r + 1) * h, q * w:(q + 1) * w] = tile
    return mosaic


def cmd_dump_features(args) -> int:
    if args.ckpt:
        if not Path(args.ckpt).is_file():
            raise UsageError(f"checkpoint {args.ckpt!r} not found")
        model, _, _ = load_checkpoint(args.ckpt)
    elif args.list:
        model = build_model(ModelConfig(), args.seed)
    else:
        raise UsageError("dump-features needs --ckpt")
    inventory = model.feature_inventory()
    if args.list:
        for i, name in enumerate(inventory):
            print(f"{i}\t{name}")
        return 0
    if not args.image:
        raise UsageError("dump-features needs --image")
    wanted = _name_list(args.layers)
    if wanted == ["all"]:
        wanted = inventory
    picks = []
    for token in wanted:
        if token.isdigit() and int(token) < len(inventory):
            picks.append(int(token))
        elif token in inventory:
            picks.append(inventory.index(token))
        else:
            raise UsageError(f"unknown layer {token!r}; run with --list to see the inventory")
    img = D.read_ppm(args.image)
    x = Tensor(img.transpose(2, 0, 1)[None] / 255.0)
    feats: dict[str, Tensor] = {}
    model.eval()
    with T.checked(False):
        model(x, capture=feats)
    out = Path(args.out)
    write_resolved(args, out)
    for i in picks:
        name = inventory[i]
        fm = feats[name].data[0]
        path = out / f"layer{i:02d}_{name}.ppm"
        mosaic = feature_mosaic(fm)
        D.write_ppm(path, np.repeat(mosaic[..., None], 3, axis=2))
        print(f"{i}\t{name}\tchannels={fm.shape[0]}\ttile={fm.shape[1]}x{fm.shape[2]}\t{path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_default: str | None) -> None:
    p.add_argument("--config", default=None, help="flat 'key = value' file (default: none)")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   help="override any setting; repeatable")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=16, help="base channel width (default: %(default)s)")
    p.add_argument("--psa-level", choices=LEVELS, default="P5", help="PSA insertion level (default: %(default)s)")
    p.add_argument("--state-dim", type=int, default=8, help="SSM state size per channel (default: %(default)s)")


def _optim_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs, help="training epochs (default: %(default)s)")
    p.add_argument("--lr", type=float, default=0.01, help="initial learning rate (default: %(default)s)")
    p.add_argument("--momentum", type=float, default=0.937, help="SGD momentum (default: %(default)s)")
    p.add_argument("--weight-decay", type=float, default=0.0005, help="decoupled weight decay (default: %(default)s)")
    p.add_argument("--batch", type=int, default=4, help="batch size (default: %(default)s)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="spmamba", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sp = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {}

    p = subs["gen-data"] = sp.add_parser("gen-data", help="render a synthetic dataset")
    _common(p, "data")
    p.add_argument("--n", type=int, default=300, help="number of images (default: %(default)s)")
    p.add_argument("--size", type=int, default=96, help="image side in pixels (default: %(default)s)")
    p.add_argument("--difficulty", choices=D.DIFFICULTIES, default="paper-like",
                   help="scene preset (default: %(default)s)")
    p.set_defaults(func=cmd_gen_data)

    p = subs["train"] = sp.add_parser("train", help="train a detector")
    _common(p, "runs/train")
    p.add_argument("--data", default="data", help="training dataset directory (default: %(default)s)")
    p.add_argument("--val-data", default=None, help="validation dataset (default: score on the training set)")
    _optim_flags(p, 30)
    p.add_argument("--warmup-epochs", type=float, default=1.0, help="linear warm-up length (default: %(default)s)")
    p.add_argument("--final-lr-ratio", type=float, default=0.01,
                   help="cosine floor as a fraction of lr (default: %(default)s)")
    p.add_argument("--grad-clip", type=float, default=10.0, help="global gradient-norm cap (default: %(default)s)")
    p.add_argument("--hflip", action=argparse.BooleanOptionalAction, default=True,
                   help="random horizontal flips")
    p.add_argument("--eval-every", type=int, default=1, help="epochs between mAP evaluations (default: %(default)s)")
    _model_flags(p)
    p.add_argument("--mamba", action=argparse.BooleanOptionalAction, default=True,
                   help="ODSS blocks instead of conv residual blocks")
    p.add_argument("--psa", action=argparse.BooleanOptionalAction, default=True, help="PSA module")
    p.add_argument("--sppelan", action=argparse.BooleanOptionalAction, default=True,
                   help="SPPELAN module")
    p.add_argument("--group", type=int, default=None, help="ablation group 1..7, overrides the module switches")
    p.add_argument("--resume", action="store_true", default=False, help="continue from OUT/last.ckpt (default: off)")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs in this call")
    p.set_defaults(func=cmd_train)

    p = subs["eval"] = sp.add_parser("eval", help="compute P, R, AP and mAP")
    _common(p, "runs/eval")
    p.add_argument("--ckpt", default=None, help="checkpoint to evaluate")
    p.add_argument("--data", default=None, help="dataset with ground truth")
    p.add_argument("--dets-csv", default=None, help="score this detections file instead of running a model")
    p.add_argument("--conf", type=float, default=EVAL_CONF, help="score threshold (default: %(default)s)")
    p.add_argument("--iou", type=float, default=NMS_IOU, help="NMS IoU threshold (default: %(default)s)")
    p.add_argument("--num-classes", type=int, default=len(D.CLASS_NAMES),
                   help="class count for --dets-csv (default: %(default)s)")
    p.set_defaults(func=cmd_eval)

    p = subs["gradcheck"] = sp.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, None)
    p.add_argument("--list", action="store_true", default=False, help="print the check inventory and exit")
    p.add_argument("--blocks", default="", help="comma-separated subset of checks (default: all)")
    p.add_argument("--inject-fault", default="", help="comma-separated blocks whose backward is doubled")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed (default: %(default)s)")
    p.add_argument("--h", type=float, default=checks.FD_STEP, help="finite-difference step (default: %(default)s)")
    p.set_defaults(func=cmd_gradcheck)

    p = subs["ablate"] = sp.add_parser("ablate", help="train the seven module combinations over several seeds")
    _common(p, "runs/ablation")
    p.add_argument("--data", default="data", help="training dataset directory (default: %(default)s)")
    p.add_argument("--val-data", default=None, help="validation dataset (default: score on the training set)")
    p.add_argument("--groups", default="1,2,3,4,5,6,7", help="groups to run (default: %(default)s)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: %(default)s)")
    _optim_flags(p, 20)
    _model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = subs["dump-features"] = sp.add_parser("dump-features", help="write per-layer feature mosaics")
    _common(p, "runs/features")
    p.add_argument("--ckpt", default=None, help="checkpoint to load")
    p.add_argument("--image", default=None, help="input PPM image")
    p.add_argument("--layers", default="0", help="layer ids or names, comma-separated, or 'all' (default: %(default)s)")
    p.add_argument("--list", action="store_true", default=False, help="print the layer inventory and exit")
    p.set_defaults(func=cmd_dump_features)
    return parser, subs


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = resolve_args(parser, subs, argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (UsageError, ConfigError, DimensionError, LoadError, FileNotFoundError) as exc:
        print(f"spmamba: error: {exc}", file=sys.stderr)
        return 2
    except (EvaluationError, SPMambaError) as exc:
        print(f"spmamba: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
