"""Loss-term or pooling ablation over several training seeds.

Writes one row per variant (median held-out top-k over the seeds) as a text
table and a CSV next to ``--out``.

    python3 scripts/run_ablation.py loss --seeds 0 1 2 3 4 --out results/loss
    python3 scripts/run_ablation.py pooling --out results/pooling
"""
import argparse
import statistics

from xmodal.evaltool import RankingResult, format_table, write_results
from xmodal.harness import experiments

KINDS = {"loss": experiments.LOSS_ABLATION, "pooling": experiments.POOLING_ABLATION}


def _median(outcomes) -> RankingResult:
    first = outcomes[0].test
    topk = {k: statistics.median(o.test.topk[k] for o in outcomes) for k in first.topk}
    return RankingResult(first.ranked, first.first_correct, topk)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=sorted(KINDS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", help="path stem for the .txt and .csv tables")
    args = ap.parse_args(argv)

    def show(o):
        print(f"{o.label:<18} seed {o.seed}  top-1 {o.top1:.3f}  top-10 {o.test.topk[10]:.3f}  ({o.seconds:.0f}s)", flush=True)

    runs = experiments.ablation(KINDS[args.kind], args.seeds, experiments.world(args.data_seed), log=show)
    rows = [(label, _median(outs)) for label, outs in runs.items()]
    print(format_table(rows))
    if args.out:
        for p in write_results(args.out, rows):
            print(f"wrote {p}")


if __name__ == "__main__":
    main()
