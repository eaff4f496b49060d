"""Desk-scale experiment: train JEPA, actor and frame baseline; evaluate on
held-out trajectories. Writes checkpoints and metrics.json to --out.

    python3 scripts/desk_experiment.py --out runs/desk --seed 0
"""

import argparse
import json
import logging
import time
from pathlib import Path

from tsjepa.config import config_hash, load_config, to_dict
from tsjepa.jepa import rollout_error
from tsjepa.pipeline import desk_run, make_datasets, with_stats


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1, help="processes for data generation only")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = desk_run(cfg, args.seed, args.jobs,
                   progress=lambda e, l: logging.info("epoch %3d  loss %.5f", e + 1, l))
    res.jepa.save(out / "jepa", {"seed": args.seed})
    res.actor.save(out / "actor.ckpt")
    res.supervised.save(out / "supervised.ckpt")
    data = make_datasets(cfg, args.seed, args.jobs, which=("train", "heldout"))
    cos_err = rollout_error(res.jepa, with_stats(data["heldout"], data["train"]), 10, cfg.augment)
    metrics = dict(res.metrics(), rollout_cosine_error=cos_err.tolist(), seed=args.seed,
                   config=to_dict(cfg), config_hash=config_hash(cfg), total_s=time.perf_counter() - t0)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: metrics[k] for k in ("loss_ratio", "min_std", "actor_nmae", "mean_predictor_nmae",
                                              "supervised_nmae", "timings")}, indent=2))


if __name__ == "__main__":
    main()
