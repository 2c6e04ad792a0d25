"""Compare attention localization of guided editing against plain re-weighting.

Reports the final-step ratio of in-mask to out-of-mask attention of the new
tokens. Higher means the edit concentrates inside the region.
"""

import argparse

import numpy as np

from magedit.constraints import ConstraintSpec
from magedit.fixtures import random_mask, toy_fixture
from magedit.guidance import GuidanceConfig
from magedit.pipeline import EditSession, run_edit, run_reweight_baseline
from magedit.schedule import make_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fixtures", type=int, default=5)
    ap.add_argument("--scales", type=float, nargs="+", default=[1.0, 2.0, 4.0])
    ap.add_argument("--max-it", type=int, default=5)
    args = ap.parse_args()

    sched = make_schedule()
    header = ["seed", "mag"] + [f"rw x{s:g}" for s in args.scales]
    print(" ".join(f"{h:>9}" for h in header))
    for seed in range(args.fixtures):
        fx = toy_fixture(seed, image_mask=random_mask(np.random.default_rng([seed, 5]), min_side=16))

        def session():
            return EditSession(fx.z0, fx.mask, fx.pair, ConstraintSpec(), GuidanceConfig(max_it=args.max_it),
                               sched, fx.backend, seed=seed)

        _, mag = run_edit(session())
        ratios = [mag.diagnostics[-1]["in_out_ratio"]]
        for scale in args.scales:
            _, rw = run_reweight_baseline(session(), scale)
            ratios.append(rw.diagnostics[-1]["in_out_ratio"])
        print(f"{seed:>9} " + " ".join(f"{r:>9.3f}" for r in ratios))


if __name__ == "__main__":
    main()
