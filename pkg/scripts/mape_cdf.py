"""Inter-frame MAPE distribution with and without augmentation, and at two
sampling intervals. Writes mape.csv (kind, value) to --out.

    python3 scripts/mape_cdf.py --out runs/mape
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from tsjepa.plant import AugmentConfig, PlantParams, RenderSpec, augment_batch, design_controller, generate_dataset
from tsjepa.sim import mape


def frame_mapes(frames):
    return [mape(frames[k - 1], frames[k]) for k in range(1, len(frames))]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n-traj", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    aug = AugmentConfig(target_size=None, normalize=False)
    rows = []
    for dt in (1e-3, 5e-4):
        p = replace(PlantParams(), dt=dt)
        ds = generate_dataset(args.n_traj, 100, p, design_controller(p), RenderSpec(), args.seed)
        for t in ds.trajectories:
            f = t.frames.astype(float)
            rows += [(f"raw dt={dt:g}", v) for v in frame_mapes(f)]
            if dt == 1e-3:
                rows += [("augmented dt=0.001", v) for v in frame_mapes(augment_batch(f, rng, aug))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "mape.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "mape_percent"])
        w.writerows((k, repr(float(v))) for k, v in rows)
    for kind in sorted({k for k, _ in rows}):
        v = np.array([x for k, x in rows if k == kind])
        print(f"{kind:<20} median {np.median(v):8.3f}%  p90 {np.percentile(v, 90):8.3f}%")


if __name__ == "__main__":
    main()
