"""``xmodal`` command line.

Exit codes: 0 success, 1 bad usage or invalid configuration, 2 failure while
running (unreadable files, non-finite loss, a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from xmodal import tensorlab as tl
from xmodal.errors import ConfigError, InputError, XModalError
from xmodal.evaltool import format_table, write_results
from xmodal.harness import checkpoint
from xmodal.harness.config import Config, load_config, parse_override, parse_value
from xmodal.harness.data import SyntheticSpec, gen_data, load_dataset
from xmodal.harness.gradsuite import run_suite
from xmodal.harness.train import Model, evaluate_params, plan_for, split_checkpoint, train
from xmodal.mining import BatchSpec, sample_batch

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xmodal", description="Cross-modal image/text association with mined negatives.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic attribute dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument(
        "--set", action="append", default=[], metavar="FIELD=VALUE",
        help="synthetic spec field, e.g. num_identities=50 or sigma_img=0.1",
    )

    t = sub.add_parser("train", help="train from a dataset directory")
    _common(t)
    t.add_argument("--data", help="dataset directory (default: data.dir)")
    t.add_argument("--out", help="run directory (default: data.out)")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="rank a split's images for every text")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: data.dir)")
    e.add_argument("--split", choices=["test", "train", "all"], default="test")
    e.add_argument("--mode", choices=["plain-cosine", "gated"], default="plain-cosine")
    e.add_argument("--label", default="model")
    e.add_argument("--results", help="write <stem>.txt and <stem>.csv")

    m = sub.add_parser("mine", help="print the mining plan for one sampled batch as JSON")
    _common(m)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", help="dataset directory (default: data.dir)")
    m.add_argument("--batch-seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="compare reverse-mode gradients with central differences")
    c.add_argument("--seed", type=int, default=0)
    return parser


def _config(args, ckpt: str | None = None) -> Config:
    path = args.config
    if path is None and ckpt is not None:
        beside = Path(ckpt).parent / "config.txt"  # written by train
        path = beside if beside.exists() else None
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(path, overrides)


def _spec(items) -> SyntheticSpec:
    spec = SyntheticSpec()
    known = {f.name: f.type for f in fields(spec)}
    for item in items:
        key, value = parse_override(item)
        if key not in known:
            raise ConfigError(f"unknown synthetic spec field {key!r}")
        value = parse_value(value) if isinstance(value, str) else value
        current = getattr(spec, key)
        if isinstance(current, int) and not (isinstance(value, (int, float)) and float(value).is_integer()):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        setattr(spec, key, type(current)(value))
    try:
        return spec.validate()
    except InputError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_gen_data(args) -> int:
    spec = _spec(args.set)
    out = gen_data(spec, args.seed, args.out)
    ds = load_dataset(out)
    print(f"wrote {len(ds.image_ids)} images, {len(ds.texts)} texts, {len(ds.identities())} identities to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _config(args)
    if args.data:
        cfg.data.dir = args.data
    if args.out:
        cfg.data.out = args.out
    res = train(cfg, load_dataset(cfg.data.dir), cfg.data.out, resume=args.resume)
    last = res.metrics[-1] if res.metrics else {}
    tops = " ".join(f"{k} {last[k]:.3f}" for k in ("top1", "top5", "top10") if k in last)
    print(f"trained {cfg.optim.epochs} epochs; final loss {last.get('total', float('nan')):.4f} {tops}".rstrip())
    print(f"run directory {res.out_dir}")
    return EXIT_OK


def _load(args):
    cfg = _config(args, args.checkpoint)
    ds = load_dataset(args.data or cfg.data.dir)
    params, _, _ = split_checkpoint(checkpoint.load(args.checkpoint))
    return cfg, ds, params


def _cmd_eval(args) -> int:
    cfg, ds, params = _load(args)
    if args.split != "all":
        ds = ds.subset(args.split)
    res = evaluate_params(cfg, params, ds, args.mode)
    print(format_table([(args.label, res)]))
    if args.results:
        for p in write_results(args.results, [(args.label, res)]):
            print(f"wrote {p}")
    return EXIT_OK


def _cmd_mine(args) -> int:
    cfg, ds, params = _load(args)
    ds = ds.subset("train") if len(ds.subset("train").image_ids) else ds
    spec = BatchSpec(cfg.batch.identities, cfg.batch.images_per_id, cfg.batch.texts_per_image)
    batch = sample_batch(ds, spec, np.random.default_rng(args.batch_seed))
    with tl.no_grad():
        model = Model.from_arrays(cfg, params)
        feats = model.encode(batch.images, batch.texts)
        plan = plan_for(cfg, feats, batch, model.temperature_value())
    out = {
        "image_ids": [int(i) for i in batch.image_ids],
        "text_ids": [int(i) for i in batch.text_ids],
        "positives": [list(map(int, p)) for p in batch.positives],
        **plan.as_dict(),
    }
    print(json.dumps(out, indent=1))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    result = run_suite(args.seed, log=print)
    verdict = "passed" if result.passed else "FAILED"
    print(f"{verdict}: {len(result.reports)} cases, worst rel err {result.worst:.2e}, {result.seconds:.1f}s")
    return EXIT_OK if result.passed else EXIT_RUNTIME


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "mine": _cmd_mine,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (XModalError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
