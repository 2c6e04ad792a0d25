"""Print the per-step loss and in-mask attention trace of one toy edit."""

import argparse
import json

from magedit.constraints import ConstraintSpec
from magedit.fixtures import toy_fixture
from magedit.guidance import GuidanceConfig
from magedit.pipeline import EditSession, run_edit
from magedit.schedule import make_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--constraint", choices=["tr", "sr"], default="sr")
    ap.add_argument("--source", default="a green sofa in a room")
    ap.add_argument("--target", default="a blue sofa in a room")
    ap.add_argument("--json", help="also dump the manifest here")
    args = ap.parse_args()

    fx = toy_fixture(args.seed, args.source, args.target)
    s = EditSession(fx.z0, fx.mask, fx.pair, ConstraintSpec(args.constraint), GuidanceConfig(),
                    make_schedule(), fx.backend, seed=args.seed)
    _, m = run_edit(s)
    print(f"{'step':>4} {'t':>5} {'loss0':>10} {'lossN':>10} {'in-mask before':>15} {'after':>8}")
    for tr in m.traces:
        print(f"{tr['step']:>4} {tr['t']:>5} {tr['losses'][0]:>10.4f} {tr['losses'][-1]:>10.4f} "
              f"{tr['in_mask_before']:>15.4f} {tr['in_mask_after']:>8.4f}")
    print(f"final in-mask attention {m.diagnostics[-1]['in_mask_attention_mean']:.4f}, "
          f"in/out ratio {m.diagnostics[-1]['in_out_ratio']:.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(m.to_dict(), fh, indent=2, default=str)


if __name__ == "__main__":
    main()
