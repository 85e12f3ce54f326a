"""Train on the 100-identity synthetic world and report held-out retrieval.

    python3 scripts/train_synthetic.py --out runs/synthetic
    python3 scripts/train_synthetic.py --set model.pooling=avg --seed 3
"""
import argparse
import logging

from xmodal.evaltool import format_table
from xmodal.harness import experiments
from xmodal.harness.config import parse_override


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    ap.add_argument("--out", help="run directory for logs and checkpoints")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = experiments.learning_config(dict(parse_override(s) for s in args.set), args.seed)
    ds = experiments.world(args.data_seed)
    o = experiments.run(cfg, ds, "trained", args.out)
    print(format_table([("untrained", o.untrained), ("trained", o.test)]))
    print(f"{cfg.optim.epochs} epochs in {o.seconds:.0f}s")


if __name__ == "__main__":
    main()
