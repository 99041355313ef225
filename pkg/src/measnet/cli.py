"""Command-line entry point: train, restore, eval, gradcheck, inspect.

Config files are flat INI text with sections [model], [train], [data];
unknown sections or keys are hard errors so hyperparameter typos cannot
pass silently. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .degrade import DatasetSpec, load_image, save_image
from .model import (CheckpointError, Model, ModelConfig, load_checkpoint,
                    model_from_checkpoint)
from .training import (TrainConfig, TrainingError, evaluate, fit,
                       grad_check_loss)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOL = 1e-3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- config

def _to_bool(raw: str) -> bool:
    states = configparser.ConfigParser.BOOLEAN_STATES
    key = raw.strip().lower()
    if key not in states:
        raise ValueError(raw)
    return states[key]


def _floats(raw: str) -> tuple:
    return tuple(float(x) for x in raw.split(","))


def _names(raw: str) -> tuple:
    return tuple(x.strip() for x in raw.split(",") if x.strip())


_MODEL_PARSERS = {
    "channels": int, "n_experts": int, "k_active": int, "filter_size": int,
    "heads": int, "stages": int, "balance_variant": str,
    "use_tspg": _to_bool, "use_mese": _to_bool, "use_fd": _to_bool,
    "use_mee": _to_bool, "seed": int,
}
_TRAIN_PARSERS = {
    "lr0": float, "total_steps": int, "batch_size": int, "lam": float,
    "seed": int, "grad_clip": float, "log_every": int, "eval_every": int,
    "eval_samples": int, "ckpt_every": int,
}
_DATA_PARSERS = {
    "tasks": _names, "source": str, "image_size": int, "crop": int,
    "seed": int, "corpus_size": int, "augment": _to_bool,
    "noise_sigmas": _floats, "rain_streaks": int, "rain_angle": float,
    "rain_intensity": float, "haze_t": _floats, "haze_airlight": _floats,
    "blur_sigma": _floats, "lowlight_gamma": _floats,
    "lowlight_scale": _floats,
}
_SECTION_PARSERS = {
    "model": _MODEL_PARSERS, "train": _TRAIN_PARSERS, "data": _DATA_PARSERS,
}


def _parse_section(cp, section: str) -> dict:
    parsers = _SECTION_PARSERS[section]
    out = {}
    if section not in cp:
        return out
    for key, raw in cp[section].items():
        if key not in parsers:
            raise UsageError(f"[{section}] unknown key '{key}'")
        try:
            out[key] = parsers[key](raw)
        except (ValueError, TypeError):
            raise UsageError(f"[{section}] bad value for '{key}': {raw!r}")
    return out


def load_config(path) -> tuple:
    """Parse an INI config into (ModelConfig, TrainConfig, DatasetSpec)."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(p.read_text(encoding="utf-8"))
    except (configparser.Error, UnicodeDecodeError) as e:
        raise UsageError(f"malformed config {path}: {e}")
    unknown = set(cp.sections()) - set(_SECTION_PARSERS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    try:
        return (ModelConfig(**_parse_section(cp, "model")),
                TrainConfig(**_parse_section(cp, "train")),
                DatasetSpec(**_parse_section(cp, "data")))
    except ValueError as e:
        raise UsageError(f"invalid config {path}: {e}")


def _apply_overrides(args, mcfg, tcfg, dspec):
    if getattr(args, "seed", None) is not None:
        mcfg = replace(mcfg, seed=args.seed)
        tcfg = replace(tcfg, seed=args.seed)
        dspec = replace(dspec, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        tcfg = replace(tcfg, total_steps=args.steps)
    return mcfg, tcfg, dspec


# ------------------------------------------------------------- commands

def _load_model(path) -> Model:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        ckpt = load_checkpoint(p)
        return model_from_checkpoint(ckpt, dtype=np.float32)
    except CheckpointError as e:
        raise DataError(str(e))


def _load_png(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image not found: {path}")
    try:
        return load_image(p)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}")


def cmd_train(args) -> int:
    mcfg, tcfg, dspec = _apply_overrides(args, *load_config(args.config))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    model = Model(mcfg, dtype=np.float32)
    print(f"training {model.param_count()} params for {tcfg.total_steps} "
          f"steps on tasks {','.join(dspec.tasks)}")
    rows, _ = fit(model, dspec, tcfg, log_path=outdir / "log.csv",
                  ckpt_path=outdir / "model.meas", quiet=False)
    if rows:
        print(f"total loss {rows[0]['total']:.5f} -> {rows[-1]['total']:.5f}")
    print(f"wrote {outdir / 'model.meas'} and {outdir / 'log.csv'}")
    return EXIT_OK


def cmd_restore(args) -> int:
    model = _load_model(args.checkpoint)
    img = _load_png(args.input)
    try:
        with ad.no_grad():
            restored, _ = model.forward(img, training=False)
    except ValueError as e:
        raise DataError(str(e))
    save_image(restored.data, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    mcfg, tcfg, dspec = _apply_overrides(args, *load_config(args.config))
    if args.samples < 1:
        raise DataError("empty dataset: need --samples >= 1")
    model = _load_model(args.checkpoint)
    report = evaluate(model, dspec, args.samples)
    rows = [{"task": t, "psnr": r["psnr"], "ssim": r["ssim"],
             "count": r["count"]} for t, r in sorted(report.items())]
    print(f"{'task':<10} {'psnr':>8} {'ssim':>7} {'count':>5}")
    for r in rows:
        print(f"{r['task']:<10} {r['psnr']:>8.3f} {r['ssim']:>7.4f} "
              f"{r['count']:>5}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["task", "psnr", "ssim", "count"])
            w.writeheader()
            w.writerows(rows)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        mcfg, _, _ = load_config(args.config)
    else:
        mcfg = ModelConfig(channels=8, n_experts=3, k_active=2, heads=2)
    if args.seed is not None:
        mcfg = replace(mcfg, seed=args.seed)
    model = Model(mcfg, dtype=np.float64)
    rng = np.random.default_rng(mcfg.seed)
    side = max(6, mcfg.filter_size)
    x = ad.Tensor(rng.random((1, 3, side, side)))
    target = ad.Tensor(np.full_like(x.data, 0.5))
    loss = grad_check_loss(model, x, target)

    groups: dict = {}
    for name, p in model.named_params():
        groups.setdefault(name.split(".")[0], {})[name] = p
    failed = False
    for module in sorted(groups):
        # fine step: the composed network has large third derivatives, and
        # 1e-5 finite differences carry visible truncation error on them
        report = ad.grad_check(loss, groups[module], step=1e-6,
                               tol=GRADCHECK_TOL)
        status = "PASS" if report.passed else "FAIL"
        w = report.worst
        print(f"{module:<12} {status} worst rel err {w.rel_error:.3e} "
              f"at {w.name}{w.index} ({report.checked} entries)")
        failed = failed or not report.passed
    if failed:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
]


def _write_expert_map(path, routing) -> None:
    from PIL import Image

    winners = np.argmax(routing.weights.data[0], axis=0).astype(np.uint8)
    img = Image.fromarray(winners, mode="P")
    n = routing.weights.shape[1]
    palette = []
    for j in range(n):
        palette.extend(_PALETTE[j % len(_PALETTE)])
    img.putpalette(palette)
    img.save(path)


def cmd_inspect(args) -> int:
    model = _load_model(args.checkpoint)
    img = _load_png(args.input)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        with ad.no_grad():
            _, aux = model.forward(img, training=False)
    except ValueError as e:
        raise DataError(str(e))
    cfg = model.config

    if cfg.use_mese:
        routing = aux.routings[0]
        _write_expert_map(outdir / "expert_map.png", routing)
        with open(outdir / "usage.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["expert", "count", "importance"])
            for j in range(cfg.n_experts):
                w.writerow([j, int(routing.counts[j]),
                            float(routing.importance.data[j])])
        print(f"wrote {outdir / 'expert_map.png'} and {outdir / 'usage.csv'}")
    else:
        print("skipped expert map and usage histogram (routing disabled)")

    if cfg.use_mee:
        with open(outdir / "global_scores.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["branch", "expert", "score"])
            for branch, scores in (("low", aux.scores_low[0]),
                                   ("high", aux.scores_high[0])):
                for j in range(cfg.n_experts):
                    w.writerow([branch, j, float(scores.data[j])])
        print(f"wrote {outdir / 'global_scores.csv'}")
    else:
        print("skipped global scores (global ensemble disabled)")

    pair = aux.freq[0]
    with open(outdir / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "low_energy", "high_energy"])
        low = pair.low.data[0]
        high = pair.high.data[0]
        for c in range(low.shape[0]):
            w.writerow([c, float(np.mean(low[c] ** 2)),
                        float(np.mean(high[c] ** 2))])
    print(f"wrote {outdir / 'spectrum.csv'}")
    return EXIT_OK


# --------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="measnet",
        description="all-in-one image restoration with expert routing")
    sub = top.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override [train] total_steps")
    t.add_argument("--out", default="run", help="output directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore one PNG with a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("input", help="degraded PNG")
    r.add_argument("--out", required=True, help="restored PNG path")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="per-task PSNR/SSIM on synthetic data")
    e.add_argument("checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--samples", type=int, default=8)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="optional CSV output path")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck",
                       help="finite-difference check of every module")
    g.add_argument("--config", help="defaults to the tiny test config")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect",
                       help="routing and frequency diagnostics for one image")
    i.add_argument("checkpoint")
    i.add_argument("input", help="degraded PNG")
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(func=cmd_inspect)
    return top


def main(argv=None) -> int:
    threads = os.environ.get("MEAS_THREADS")
    if threads is not None and (not threads.isdigit() or int(threads) < 1):
        print(f"MEAS_THREADS must be a positive integer, got {threads!r}",
              file=sys.stderr)
        return EXIT_USAGE
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NumericsError, TrainingError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
