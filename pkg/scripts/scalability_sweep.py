"""Max supported devices per policy and stack (scores within the band).

    python3 scripts/scalability_sweep.py --run runs/desk --out runs/scal --jobs 4
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from common import load_models
from tsjepa.config import load_config
from tsjepa.sim import sweep


def main(argv=None, loss_probs=(None,)):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", required=True, help="output directory of desk_experiment.py")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--loss-prob", type=float, action="append")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    cfg = load_config(args.config, args.set)
    sw = cfg.sweep
    res = sweep(replace(cfg.episode, seed=args.seed), load_models(args.run, cfg), sw.device_counts, sw.policies,
                sw.stacks, sw.n_seeds, tuple(args.loss_prob) if args.loss_prob else loss_probs, cfg.radio,
                cfg.scheduler, args.jobs, sw.band)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "sweep.csv")
    (out / "summary.json").write_text(json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")
    for (stack, policy, loss), n in res.supported().items():
        print(f"{stack:>10}  {policy:<14} loss={loss}  max devices {n}")


if __name__ == "__main__":
    main()
