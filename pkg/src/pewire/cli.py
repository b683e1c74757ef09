"""``pewire`` command line.

Exit codes: 0 success, 1 gradient check out of tolerance, 2 config or file
format error, 3 numeric fault, 4 model too large for a gradient check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from pewire.checkpoint import load_checkpoint
from pewire.config import ExperimentConfig, load_config
from pewire.data import load_dataset, write_synthetic
from pewire.diagnostics import build_report, export_report
from pewire.errors import ConfigError, FormatError, NumericFault
from pewire.gradcheck import grad_check, toy_batch
from pewire.model import ModelParams, count_params
from pewire.train import evaluate, train
from pewire.wiring import forward
from pewire.wiring_config import PRESETS, WiringVariant

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_OVERSIZED = 4

PROBE_SAMPLES = 256
PARAMS_VARIANTS = (WiringVariant.DEFAULT, WiringVariant.LAPE, WiringVariant.PVG, WiringVariant.MPVG)

log = logging.getLogger("pewire")


class Oversized(Exception):
    pass


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(wiring=args.wiring, seed=args.seed, out_dir=args.out)


def _experiment_for_checkpoint(args, ckpt) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif ckpt.experiment:
        cfg = ExperimentConfig.from_dict(ckpt.experiment)
    else:
        raise ConfigError("checkpoint carries no experiment config; pass --config")
    return cfg


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def cmd_train(args) -> int:
    cfg = _experiment(args)
    out = Path(_require(cfg.out_dir, "--out (or out_dir in the config)"))
    train_set, eval_set = load_dataset(cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    result = train(cfg.model, cfg.primary_wiring, train_set, eval_set, cfg.optim, cfg.seed,
                   out_dir=out, experiment=cfg.to_dict())
    final = result.final("eval")
    print(f"epochs {final.epoch} eval_loss {final.loss:.6f} eval_accuracy {final.accuracy:.6f}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.pewire'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    cfg = _experiment_for_checkpoint(args, ckpt)
    _, eval_set = load_dataset(cfg.data)
    params = ckpt.to_params()
    loss, acc = evaluate(params, eval_set)
    line = f"{ckpt.epoch},eval,{loss!r},{acc!r}"
    print("epoch,split,loss,accuracy")
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text("epoch,split,loss,accuracy\n" + line + "\n")
    return EXIT_OK


def cmd_probe(args) -> int:
    path = _require(args.checkpoint, "--checkpoint")
    out = Path(_require(args.out, "--out"))
    ckpt = load_checkpoint(path)
    cfg = _experiment_for_checkpoint(args, ckpt)
    _, eval_set = load_dataset(cfg.data)
    probe = eval_set.take(PROBE_SAMPLES)
    params = ckpt.to_params()
    _, trace = forward(params, probe.images)
    meta = {
        "checkpoint": str(path),
        "checkpoint_sha256": ckpt.digest(),
        "config_sha256": cfg.digest(),
        "epoch": ckpt.epoch,
        "wiring": params.wiring.preset_string(),
        "head_mode": params.config.head_mode.value,
        "probe_samples": len(probe),
    }
    report = build_report(params, trace, meta)
    written = export_report(report, out)
    for c in report.correlations:
        print(f"layer {c.layer} r {'undefined' if c.r is None else f'{c.r:.6f}'}")
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _experiment(args)
    base = count_params(cfg.model, PRESETS[WiringVariant.DEFAULT])
    print("variant,params,millions,delta")
    for variant in PARAMS_VARIANTS:
        n = count_params(cfg.model, PRESETS[variant])
        print(f"{variant.value},{n},{n / 1e6:.3f},{n - base:+d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _experiment(args)
    gc = cfg.gradcheck
    for wiring in cfg.wiring:
        params = ModelParams.init(cfg.model, wiring, cfg.seed)
        if params.num_trainable() > gc.max_params:
            raise Oversized(f"{wiring.preset_string()} has {params.num_trainable()} trainable params; "
                            f"gradient checks are limited to {gc.max_params}")
    batch = toy_batch(cfg.model, gc.batch_size, cfg.seed)
    failed = []
    print("variant,worst_param,max_rel_error,passed")
    for wiring in cfg.wiring:
        params = ModelParams.init(cfg.model, wiring, cfg.seed)
        report = grad_check(params, batch=batch, step=gc.step, tol=gc.tol, richardson=gc.richardson)
        worst = report.worst
        print(f"{wiring.preset_string()},{worst.name},{worst.max_rel_error:.3e},{str(report.passed).lower()}")
        for p in report.failures():
            failed.append(f"{wiring.preset_string()}: {p.name} (max relative error {p.max_rel_error:.3e}, "
                          f"analytic {p.analytic:.6e}, numeric {p.numeric:.6e})")
    if failed:
        for line in failed:
            log.error("out of tolerance %s", line)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = _experiment(args)
    out = Path(_require(cfg.out_dir, "--out"))
    for path in write_synthetic(cfg.data, out):
        print(path)
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train from scratch; writes metrics.csv and checkpoint.pewire"),
    "eval": (cmd_eval, "evaluate a checkpoint on the eval split"),
    "probe": (cmd_probe, "export diagnostics for the first 256 eval samples"),
    "params": (cmd_params, "parameter counts per wiring variant"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check of every configured variant"),
    "synth-data": (cmd_synth_data, "write the synthetic-quadrant set as IDX files"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pewire", description="Position-embedding wiring experiments on a small ViT.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--checkpoint", help="checkpoint file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--wiring", help="wiring preset, e.g. mpvg or lape,hier=false")
        p.add_argument("--seed", type=int, help="experiment seed")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(f"pewire {args.command}: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)

    try:
        return COMMANDS[args.command][0](args)
    except (ConfigError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename or exc)
        return EXIT_CONFIG
    except NumericFault as exc:
        log.error("numeric fault in op %s: %s", exc.op or "?", exc)
        return EXIT_NUMERIC
    except Oversized as exc:
        log.error("%s", exc)
        return EXIT_OVERSIZED
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
