"""Sweep the end of the guidance window and report final in-mask attention.

tau2=50 disables latent optimization, leaving plain attention injection.
"""

import argparse

import numpy as np

from magedit.constraints import ConstraintSpec
from magedit.fixtures import random_mask, toy_fixture
from magedit.guidance import GuidanceConfig
from magedit.pipeline import EditSession, run_edit
from magedit.schedule import make_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fixtures", type=int, default=5)
    ap.add_argument("--tau2", type=int, nargs="+", default=[50, 40, 30, 25, 15])
    ap.add_argument("--constraint", choices=["tr", "sr"], default="sr")
    ap.add_argument("--max-it", type=int, default=5)
    args = ap.parse_args()

    sched = make_schedule()
    print(f"{'seed':>4} " + " ".join(f"tau2={t:<4}" for t in args.tau2))
    for seed in range(args.fixtures):
        fx = toy_fixture(seed, image_mask=random_mask(np.random.default_rng([seed, 99])))
        row = []
        for tau2 in args.tau2:
            cfg = GuidanceConfig(tau2=tau2, max_it=args.max_it)
            s = EditSession(fx.z0, fx.mask, fx.pair, ConstraintSpec(args.constraint), cfg, sched, fx.backend, seed=seed)
            _, m = run_edit(s)
            row.append(m.diagnostics[-1]["in_mask_attention_mean"])
        print(f"{seed:>4} " + " ".join(f"{v:<9.4f}" for v in row))


if __name__ == "__main__":
    main()
