"""Command-line entry point: ``nca-sensing {gen,train,eval,baseline,exp} ...``.

Every option may also come from a JSON file passed with ``--config``; explicit
flags override it. Each run writes ``manifest.json`` with the argv and the fully
resolved configuration into its output directory.

Exit codes: 0 success, 1 usage error (nothing written), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .baseline import CnnModel, CnnTrainConfig, cnn_evaluate, cnn_train
from .grid_state import PHYSICAL_PITCH_MM
from .nca import RolloutConfig
from .training import (
    EvalResult,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train,
    write_curve,
)
from .world import (
    MODES,
    SensorBank,
    calibrate,
    calibrate_bank,
    default_shapes,
    generate_dataset,
    load_dataset,
    save_calibration,
    save_dataset,
    shape_by_name,
    uncalibrate,
)

OUT_ENV = "NCA_SENSING_OUT"
log = logging.getLogger("nca_sensing")

# built-in defaults; argparse defaults stay None so config files can slot in between
GLOBAL_DEFAULTS = {"seed": 0, "grid": "8x8", "pitch": PHYSICAL_PITCH_MM, "mode": "binary", "jobs": 1}
DEFAULTS = {
    "gen": {"shapes": "default", "n": 100, "margin": 1.0, "split": 0.5, "calibration": False},
    "train": {"steps": 5000, "lr": 2e-3, "lr_decay_at": 2500, "batch": 8, "pool": 64, "hidden": 8, "width": 64,
              "fire_rate": 0.5, "steps_min": 15, "steps_max": 30, "grad_clip": 1.0},
    "eval": {"fire_rate": 0.5, "steps_min": 15, "steps_max": 30},
    "baseline": {"steps": 3000, "lr": 1e-3, "batch": 32, "weight_decay": 1e-3},
    "exp": {"trials": 100, "sizes": "4,8,16,32,64", "samples": 20, "scale_steps": False, "full": False,
            "fire_rate": 0.5, "steps_min": 15, "steps_max": 30, "steps": 5000, "lr": 2e-3, "lr_decay_at": 2500},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"grid must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"grid dims must be positive, got {text!r}")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option values (flags win)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command> or ./runs/<command>)")
    common.add_argument("--grid", help="grid dims HxW")
    common.add_argument("--pitch", type=float, help="tile pitch in mm for reporting")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--jobs", type=int, help="worker processes for trials (output is identical for any value)")
    common.add_argument("-v", "--verbose", action="store_true")

    rollout = _Parser(add_help=False)
    rollout.add_argument("--fire-rate", type=float)
    rollout.add_argument("--steps-min", type=int)
    rollout.add_argument("--steps-max", type=int)

    p = _Parser(prog="nca-sensing", description="NCA decentralized center estimation on sensor grids")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset and train/test split")
    g.add_argument("--shapes", help="'default' or comma-separated names from the default set")
    g.add_argument("--n", type=int, help="placements per shape")
    g.add_argument("--margin", type=float, help="keep centroids this many tiles inside the grid")
    g.add_argument("--split", type=float, help="train fraction")
    g.add_argument("--calibration", action="store_true", default=None,
                   help="pressure mode: also write raw (uncalibrated) and calibrated variants")

    t = sub.add_parser("train", parents=[common, rollout], help="train an NCA model")
    t.add_argument("--data", help="training CSV")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay-at", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--pool", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--grad-clip", type=float)

    e = sub.add_parser("eval", parents=[common, rollout], help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt")
    e.add_argument("--data")

    b = sub.add_parser("baseline", parents=[common], help="train the centralized CNN")
    b.add_argument("--data")
    b.add_argument("--steps", type=int)
    b.add_argument("--lr", type=float)
    b.add_argument("--batch", type=int)
    b.add_argument("--weight-decay", type=float)

    x = sub.add_parser("exp", parents=[common, rollout], help="run an experiment sweep")
    x.add_argument("which", choices=("perf", "fault", "noise", "scale"))
    x.add_argument("--ckpt")
    x.add_argument("--data", help="test CSV (fault/noise) or gen --calibration directory (perf)")
    x.add_argument("--ckpt-cal")
    x.add_argument("--ckpt-uncal")
    x.add_argument("--trials", type=int)
    x.add_argument("--sizes")
    x.add_argument("--samples", type=int, help="scale: placements per shape per size")
    x.add_argument("--scale-steps", action="store_true", default=None)
    x.add_argument("--full", action="store_true", default=None, help="scale: include 100x100")
    x.add_argument("--steps", type=int, help="perf: training steps when no checkpoints are given")
    x.add_argument("--lr", type=float)
    x.add_argument("--lr-decay-at", type=int)
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(GLOBAL_DEFAULTS)
    cfg.update(DEFAULTS.get(args.command, {}))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "verbose"):
            cfg[k] = v
    if not cfg.get("out"):
        root = os.environ.get(OUT_ENV, "runs")
        sub = args.command + (f"_{args.which}" if args.command == "exp" else "")
        cfg["out"] = str(Path(root) / sub)
    cfg["grid_dims"] = list(parse_grid(cfg["grid"]))
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    return cfg


def _need_file(cfg: dict, key: str, what: str) -> Path:
    val = cfg.get(key)
    if not val:
        raise UsageError(f"missing --{key.replace('_', '-')} ({what})")
    path = Path(val)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _rollout(cfg: dict) -> RolloutConfig:
    try:
        return RolloutConfig(cfg["steps_min"], cfg["steps_max"], cfg["fire_rate"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _shapes(spec: str):
    if spec == "default":
        return default_shapes()
    try:
        return [shape_by_name(n.strip()) for n in spec.split(",") if n.strip()]
    except KeyError as exc:
        raise UsageError(str(exc)) from None


def _validate(cfg: dict) -> None:
    """Usage checks that must pass before anything is written."""
    cmd = cfg["command"]
    if cmd == "gen":
        _shapes(cfg["shapes"])
        if cfg["calibration"] and cfg["mode"] != "pressure":
            raise UsageError("--calibration needs --mode pressure")
    elif cmd in ("train", "baseline"):
        _need_file(cfg, "data", "training dataset")
    elif cmd == "eval":
        _need_file(cfg, "ckpt", "checkpoint")
        _need_file(cfg, "data", "dataset")
        _rollout(cfg)
    elif cmd == "exp":
        _rollout(cfg)
        which = cfg["which"]
        if which in ("fault", "noise"):
            _need_file(cfg, "ckpt", "checkpoint")
            _need_file(cfg, "data", "test dataset")
        elif which == "scale":
            _need_file(cfg, "ckpt", "checkpoint")
            try:
                [int(s) for s in str(cfg["sizes"]).split(",")]
            except ValueError:
                raise UsageError(f"--sizes must be comma-separated integers, got {cfg['sizes']!r}") from None
        else:
            if not cfg.get("data") or not Path(cfg["data"]).is_dir():
                raise UsageError("exp perf needs --data pointing at a 'gen --calibration' output directory")
            for part in ("train", "test"):
                for kind in ("calibrated", "uncalibrated"):
                    f = Path(cfg["data"]) / f"{part}_{kind}.csv"
                    if not f.is_file():
                        raise UsageError(f"missing {f}")
            for key in ("ckpt_cal", "ckpt_uncal"):
                if cfg.get(key):
                    _need_file(cfg, key, "checkpoint")


def _manifest(out: Path, argv: list[str], cfg: dict, artifacts: dict, checkpoint=None, results=None) -> None:
    ex.write_manifest(out / "manifest.json", argv, cfg, artifacts, checkpoint, results)


def cmd_gen(cfg: dict, out: Path, argv: list[str]) -> None:
    dims = tuple(cfg["grid_dims"])
    shapes = _shapes(cfg["shapes"])
    data = generate_dataset(shapes, cfg["n"], dims, cfg["mode"], cfg["seed"], cfg["margin"])
    train_set, test_set = split_dataset(data, cfg["split"], cfg["seed"])
    save_dataset(data, out / "dataset.csv")
    save_dataset(train_set, out / "train.csv")
    save_dataset(test_set, out / "test.csv")
    artifacts = {"dataset": "dataset.csv", "train": "train.csv", "test": "test.csv"}
    if cfg["calibration"]:
        bank = SensorBank.random(dims, cfg["seed"])
        curves = calibrate_bank(bank, seed=cfg["seed"])
        save_calibration(curves, out / "calibration.csv")
        artifacts["calibration"] = "calibration.csv"
        for kind, conv in (("uncalibrated", lambda s: uncalibrate(s, bank)),
                           ("calibrated", lambda s: calibrate(uncalibrate(s, bank), curves))):
            for part, samples in (("train", train_set), ("test", test_set)):
                name = f"{part}_{kind}.csv"
                save_dataset(conv(samples), out / name)
                artifacts[f"{part}_{kind}"] = name
    _manifest(out, argv, cfg, artifacts, results={"samples": len(data), "train": len(train_set), "test": len(test_set)})
    print(f"wrote {len(data)} samples ({len(train_set)} train / {len(test_set)} test) to {out}")


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        pool_size=cfg.get("pool", 64), batch_size=cfg.get("batch", 8), total_steps=cfg["steps"],
        steps_min=cfg["steps_min"], steps_max=cfg["steps_max"], fire_rate=cfg["fire_rate"], lr=cfg["lr"],
        lr_decay_at=cfg.get("lr_decay_at"), grad_clip=cfg.get("grad_clip", 1.0), hidden=cfg.get("hidden", 8),
        width=cfg.get("width", 64), seed=cfg["seed"], mode=cfg["mode"],
    )


def _train_nca(train_set, tcfg: TrainConfig, out: Path, name: str):
    try:
        return train(train_set, tcfg)
    except TrainingDiverged as exc:
        save_checkpoint(out / f"{name}.diagnostic.ckpt", exc.model, tcfg, extra={"diverged_at": exc.step})
        raise


def cmd_train(cfg: dict, out: Path, argv: list[str]) -> None:
    data = load_dataset(cfg["data"])
    if not data:
        raise ValueError(f"{cfg['data']} holds no samples")
    tcfg = _train_config(cfg)
    model, curve = _train_nca(data, tcfg, out, "model")
    save_checkpoint(out / "model.ckpt", model, tcfg, curve, extra={"grid": list(data[0].grid_shape)})
    write_curve(curve, out / "curve.csv")
    final = curve[-1] if curve else None
    _manifest(out, argv, cfg, {"checkpoint": "model.ckpt", "curve": "curve.csv"}, out / "model.ckpt",
              {"steps_run": len(curve), "final_loss": final.loss if final else None})
    print(f"trained {len(curve)} steps; checkpoint at {out / 'model.ckpt'}")


def cmd_baseline(cfg: dict, out: Path, argv: list[str]) -> None:
    data = load_dataset(cfg["data"])
    if not data:
        raise ValueError(f"{cfg['data']} holds no samples")
    bcfg = CnnTrainConfig(cfg["steps"], cfg["batch"], cfg["lr"], cfg["weight_decay"], cfg["seed"])
    model, curve = cnn_train(data, bcfg)
    save_checkpoint(out / "model.ckpt", model, bcfg, curve, model_kind="centralized")
    write_curve(curve, out / "curve.csv")
    _manifest(out, argv, cfg, {"checkpoint": "model.ckpt", "curve": "curve.csv"}, out / "model.ckpt")
    print(f"trained centralized baseline; checkpoint at {out / 'model.ckpt'}")


def _load_model(path):
    return load_checkpoint(path).model


def _eval(model, data, rcfg, seed) -> EvalResult:
    if isinstance(model, CnnModel):
        return cnn_evaluate(model, data)
    return evaluate(model, data, rcfg, seed)


def cmd_eval(cfg: dict, out: Path, argv: list[str]) -> None:
    model = _load_model(cfg["ckpt"])
    data = load_dataset(cfg["data"])
    res = _eval(model, data, _rollout(cfg), cfg["seed"])
    sweep = ex.SweepResult("dataset", [Path(cfg["data"]).stem], [res.errors], cfg["seed"])
    ex.write_results(sweep, out / "errors.csv")
    summary = {**res.summary(), "mean_mm": res.mean * cfg["pitch"]}
    _manifest(out, argv, cfg, {"errors": "errors.csv"}, cfg["ckpt"], summary)
    print(f"mean error {res.mean:.4f} tiles ({summary['mean_mm']:.2f} mm), std {res.std:.4f}, n={len(res.errors)}")


def _write_sweep(result: ex.SweepResult, out: Path, name: str, ylabel: str = "error (tiles)") -> dict:
    ex.write_results(result, out / f"{name}.csv")
    ex.write_summary(result, out / f"{name}_summary.csv")
    ex.render_plot(result, out / f"{name}.svg", ylabel)
    return {"raw": f"{name}.csv", "summary": f"{name}_summary.csv", "plot": f"{name}.svg"}


def cmd_exp(cfg: dict, out: Path, argv: list[str]) -> None:
    which, seed, jobs = cfg["which"], cfg["seed"], cfg["jobs"]
    rcfg = _rollout(cfg)
    if which in ("fault", "noise"):
        model = _load_model(cfg["ckpt"])
        data = load_dataset(cfg["data"])
        fn = ex.exp_fault if which == "fault" else ex.exp_noise
        result = fn(model, data, trials=cfg["trials"], seed=seed, rcfg=rcfg, jobs=jobs)
        arts = _write_sweep(result, out, which)
        _manifest(out, argv, cfg, arts, cfg["ckpt"], {"summary": result.summary_rows()})
    elif which == "scale":
        model = _load_model(cfg["ckpt"])
        sizes = [int(s) for s in str(cfg["sizes"]).split(",")]
        if cfg["full"] and 100 not in sizes:
            sizes.append(100)
        result = ex.exp_scale(model, sizes, cfg["samples"], seed, rcfg, cfg["scale_steps"], jobs=jobs)
        arts = _write_sweep(result, out, "scale")
        _manifest(out, argv, cfg, arts, cfg["ckpt"], {"summary": result.summary_rows()})
    else:
        d = Path(cfg["data"])
        models, tests, ckpts = {}, {}, {}
        for kind in ("calibrated", "uncalibrated"):
            tests[kind] = load_dataset(d / f"test_{kind}.csv")
            key = "ckpt_cal" if kind == "calibrated" else "ckpt_uncal"
            if cfg.get(key):
                models[kind] = _load_model(cfg[key])
                ckpts[kind] = cfg[key]
            else:
                tcfg = _train_config({**DEFAULTS["train"], **cfg})
                models[kind], curve = _train_nca(load_dataset(d / f"train_{kind}.csv"), tcfg, out, kind)
                save_checkpoint(out / f"{kind}.ckpt", models[kind], tcfg, curve)
                ckpts[kind] = str(out / f"{kind}.ckpt")
        res = ex.exp_performance(models, tests, rcfg, seed, cfg["pitch"], jobs)
        arts = _write_sweep(res.as_sweep(seed), out, "perf")
        results = {
            "U": res.u, "p": res.p,
            **{f"mean_tiles_{k}": float(np.mean(v)) for k, v in res.errors.items()},
            **{f"mean_mm_{k}": float(np.mean(res.errors_mm(k))) for k in res.errors},
            "checkpoints": ckpts,
        }
        _manifest(out, argv, cfg, arts, None, results)
        print(f"calibrated {results['mean_mm_calibrated']:.2f} mm, uncalibrated {results['mean_mm_uncalibrated']:.2f} mm, "
              f"Mann-Whitney U={res.u:.1f} p={res.p:.3f}")
        return
    for row in result.summary_rows():
        print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline, "exp": cmd_exp}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        _validate(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[cfg["command"]](cfg, out, argv)
    except Exception as exc:  # runtime failure: report and leave a manifest of whatever exists
        message = f"{type(exc).__name__}: {exc}"
        print(f"error: {message}", file=sys.stderr)
        try:
            partial = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
            ex.write_manifest(out / "manifest.json", argv, cfg, {"partial": partial}, results={"error": message})
        except OSError:
            pass
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
