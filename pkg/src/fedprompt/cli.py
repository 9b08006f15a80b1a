"""Command-line surface.

Commands: train, eval, gradcheck, partition. Exit codes: 0 success,
2 configuration error, 3 numerical failure during training, 4 checkpoint
error, 5 gradient check over threshold.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import autodiff as ad
from .config import ConfigError, parse_config, resolved_text, scoring_config
from .evaluation import METRICS_HEADER, write_metrics_csv
from .federation import (
    CheckpointMismatch,
    TrainingDiverged,
    ledger_report,
    load_checkpoint,
    save_checkpoint,
)
from .fileio import FormatError
from .model import sample_loss
from .promptformer import init_promptformer
from .runner import build_setup, evaluate_setup, run_federation
from .seeding import derive_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5

GRADCHECK_TOLERANCE = 1e-5


def cmd_train(config_path: str, overrides: list[str]) -> int:
    cfg = parse_config(config_path, overrides)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_federation(cfg)
    history = result.history
    write_metrics_csv(out_dir / "metrics.csv", history)
    result.ledger.write_csv(out_dir / "ledger.csv")
    meta = {}
    if history:
        last = history[-1]
        meta = {
            "record_round": last.round,
            "clients": last.clients,
            "mean_train_loss": last.mean_train_loss,
            "params_sent": last.params_sent,
        }
    save_checkpoint(out_dir / "final.fmvp", result.server, meta=meta)
    (out_dir / "resolved.cfg").write_text(resolved_text(cfg), encoding="utf-8")
    print(ledger_report(result.ledger))
    if history:
        print(METRICS_HEADER)
        print(history[-1].csv_row())
    return EXIT_OK


def cmd_eval(checkpoint_path: str, config_path: str, mode: str | None,
             overrides: list[str]) -> int:
    overrides = list(overrides)
    if mode:
        overrides.append(f"mode={mode}")
    cfg = parse_config(config_path, overrides)
    setup = build_setup(cfg)
    template = setup.server.global_params
    params, lora, meta = load_checkpoint(checkpoint_path, template,
                                         lora_scale=cfg.lora_scale)
    setup.server.global_params = params
    setup.server.global_lora = lora
    setup.server.round = int(meta.get("round", 0))
    record = evaluate_setup(
        setup,
        clients_this_round=int(meta.get("clients", 0)),
        mean_train_loss=meta.get("mean_train_loss", 0.0),
        params_sent=int(meta.get("params_sent", 0)),
    )
    record.round = int(meta.get("record_round", setup.server.round))
    print(record.csv_row())
    for domain, acc in sorted(record.domain_accs.items()):
        print(f"domain,{domain},{format(acc, '.10g')}")
    return EXIT_OK


def cmd_gradcheck(config_path: str, overrides: list[str],
                  corrupt_gradient: bool = False) -> int:
    overrides = list(overrides) + ["precision=double"]
    cfg = parse_config(config_path, overrides)
    setup = build_setup(cfg)
    shard = setup.clients[0].shard
    params = setup.server.global_params
    params.set_requires_grad(True)
    scoring = scoring_config(cfg)
    image = shard.images[0]
    label = int(shard.labels[0])
    aug_seed = derive_seed(cfg.master_seed, "gradcheck-aug")

    def fn():
        return sample_loss(setup.bundle, params, None, image, label,
                           shard.class_names, scoring, aug_seed).total

    loss = fn()
    if fn().item() != loss.item():
        print("gradcheck: loss is not deterministic", file=sys.stderr)
        return EXIT_GRADCHECK
    analytic = ad.grad_map(loss, params.named())
    if corrupt_gradient:
        first = next(iter(analytic))
        analytic[first] = analytic[first] + 1e-2
    numeric = ad.numeric_gradients(fn, params.named(), step=1e-4)
    err = ad.max_relative_error(analytic, numeric)
    print(f"max relative gradient error: {err:.3e}")
    return EXIT_OK if err < GRADCHECK_TOLERANCE else EXIT_GRADCHECK


def cmd_partition(config_path: str, overrides: list[str]) -> int:
    cfg = parse_config(config_path, overrides)
    setup = build_setup(cfg)
    print(setup.plan.describe())
    if setup.schedule is not None:
        print(f"train domains: {' '.join(setup.schedule.train_domains)}")
        print(f"test domains: {' '.join(setup.schedule.test_domains)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprompt",
                                     description="Federated visual prompt tuning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run federated training")
    train.add_argument("--config", required=True)
    train.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--mode", choices=["base2new", "msst", "ssmt"], default=None)
    ev.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    gc.add_argument("--config", required=True)
    gc.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE")
    gc.add_argument("--corrupt-gradient", action="store_true",
                    help=argparse.SUPPRESS)  # negative control for the exit path

    part = sub.add_parser("partition", help="print the class split plan")
    part.add_argument("--config", required=True)
    part.add_argument("--set", dest="overrides", action="append", default=[],
                      metavar="KEY=VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.overrides)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.config, args.mode, args.overrides)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.config, args.overrides, args.corrupt_gradient)
        if args.command == "partition":
            return cmd_partition(args.config, args.overrides)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointMismatch, FormatError, FileNotFoundError) as exc:
        if args.command == "eval":
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
