"""Multi-resolution vs fine-only refinement loss under identical seeds and budgets.

    python scripts/mr_ablation.py [--seeds 0,1,2] [--epochs 100] [--train 100]
"""

import argparse
from dataclasses import replace

from prgcn.experiments import ABLATION, run_mr_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=ABLATION.epochs)
    ap.add_argument("--train", type=int, default=ABLATION.n_train)
    args = ap.parse_args()
    setup = replace(ABLATION, epochs=args.epochs, n_train=args.train)
    rows = run_mr_ablation(setup, [int(s) for s in args.seeds.split(",")])
    print(f"{'seed':>4} {'multi':>12} {'single':>12}")
    for r in rows:
        print(f"{r.seed:>4} {r.multi:12.4e} {r.single:12.4e}  {'multi' if r.multi_wins else 'single'}")
    wins = sum(r.multi_wins for r in rows)
    print(f"multi-resolution wins {wins}/{len(rows)}")


if __name__ == "__main__":
    main()
