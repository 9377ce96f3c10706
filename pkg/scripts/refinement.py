"""Train the refinement network on synthetic occluded shapes and report how
often it halves the Chamfer distance to the complete surface.

    python scripts/refinement.py [--epochs 150] [--seed 0]
"""

import argparse
from dataclasses import replace

from prgcn.experiments import RefinementSetup, run_refinement


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=RefinementSetup.epochs)
    ap.add_argument("--train", type=int, default=RefinementSetup.n_train)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    setup = replace(RefinementSetup(), epochs=args.epochs, n_train=args.train)

    def progress(epoch, mr):
        if epoch % 10 == 0 or epoch == setup.epochs - 1:
            print(f"epoch {epoch:3d}  train multi-res chamfer {mr:.4f}", flush=True)

    res = run_refinement(setup, args.seed, progress)
    for shape, med in res.per_shape_median().items():
        print(f"{shape:<7} median ratio {med:.3f}")
    print(f"scenes with ratio <= 0.5: {100 * res.fraction_halved():.0f}%  ({res.seconds:.0f} s)")


if __name__ == "__main__":
    main()
