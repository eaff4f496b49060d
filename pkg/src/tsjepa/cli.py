"""Command-line entry point.

Every command writes its outputs plus one ``manifest.json`` (resolved config,
seed, input/output hashes, version, wall-clock). ``--from-manifest`` re-runs a
command from such a manifest; outputs other than the manifest are byte-identical.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, from_dict, load_config, to_dict

log = logging.getLogger("tsjepa")

COMMANDS = ("gen-data", "train-jepa", "train-actor", "train-supervised", "simulate", "sweep",
            "channel-test", "grad-check")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def hash_tree(path) -> str:
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsjepa", description="TS-JEPA networked cart-pole co-simulator")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults: desk scale)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. scheduler.omega2=0.5 (repeatable)")
        sp.add_argument("--from-manifest", help="re-run the command recorded in a manifest")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("gen-data", help="generate train / held-out / actor datasets"))
    sp = common(sub.add_parser("train-jepa", help="train the context encoder and predictor"))
    sp.add_argument("--data", help="training dataset directory")
    sp = common(sub.add_parser("train-actor", help="fit the actor on frozen-encoder embeddings"))
    sp.add_argument("--jepa", help="directory with JEPA checkpoints")
    sp.add_argument("--data", help="actor dataset directory")
    sp = common(sub.add_parser("train-supervised", help="fit the frame-input baseline"))
    sp.add_argument("--data", help="training dataset directory")
    sp.add_argument("--kappa", type=int)
    for name, helptext in (("simulate", "run one closed-loop episode"),
                           ("sweep", "scalability / packet-loss sweeps")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--jepa")
        sp.add_argument("--actor")
        sp.add_argument("--supervised")
        sp.add_argument("--policy")
        sp.add_argument("--grants", type=int)
        sp.add_argument("--snr-db", type=float)
        sp.add_argument("--loss-prob", type=float)
        if name == "simulate":
            sp.add_argument("--stack")
            sp.add_argument("--devices", type=int)
            sp.add_argument("--ideal-channel", action="store_true", default=None)
            sp.add_argument("--init-angle", type=float)
    sp = common(sub.add_parser("channel-test", help="closed-form vs Monte Carlo outage"))
    sp.add_argument("--samples", type=int, default=1_000_000)
    sp.add_argument("--points", type=int, default=20)
    sp = common(sub.add_parser("grad-check", help="finite-difference gradient checks"))
    sp.add_argument("--compositions", type=int, default=10)
    return p


# --------------------------------------------------------------------------- commands

_ARG_KEYS = ("data", "jepa", "actor", "supervised", "kappa", "policy", "grants", "snr_db", "loss_prob",
             "stack", "devices", "ideal_channel", "init_angle", "samples", "points", "compositions")


def _episode_overrides(args) -> list:
    mapping = {"policy": "policy", "grants": "grants", "snr_db": "snr_db", "loss_prob": "loss_prob",
               "stack": "stack", "devices": "n_devices", "ideal_channel": "ideal_channel",
               "init_angle": "init_angle"}
    out = []
    for a, key in mapping.items():
        v = getattr(args, a, None)
        if v is not None:
            out.append(f"episode.{key}={json.dumps(v)}")
    return out


def _need(args, name):
    v = getattr(args, name, None)
    if v is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    if name in ("data", "jepa", "actor", "supervised") and not Path(v).exists():
        raise UsageError(f"--{name}: {v!r} does not exist")
    return v


def cmd_gen_data(cfg: ExperimentConfig, args, out: Path) -> dict:
    from .pipeline import make_datasets
    from .plant import dataset_hash, save_dataset
    hashes = {}
    for name, ds in make_datasets(cfg, args.seed, args.jobs).items():
        save_dataset(ds, out / name)
        hashes[name] = dataset_hash(out / name)
    return {"datasets": hashes}


def cmd_train_jepa(cfg, args, out: Path) -> dict:
    from .jepa import train_jepa
    from .plant import load_dataset
    from .seeding import child_rng
    ds = load_dataset(_need(args, "data"))
    res = train_jepa(ds, cfg.jepa, child_rng(args.seed, "train"), cfg.augment, diagnostic_dir=out / "diverged",
                     progress=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    res.model.save(out, {"seed": args.seed, "steps": len(res.step_loss)})
    write_json(out / "curve.json", {"epoch_loss": res.epoch_loss})
    return {"inputs": {"data": hash_tree(args.data)}}


def cmd_train_actor(cfg, args, out: Path) -> dict:
    from .jepa import JepaModel
    from .pipeline import fit_actor
    from .plant import load_dataset
    model = JepaModel.load(_need(args, "jepa"))
    ds = load_dataset(_need(args, "data"))
    ds.manifest.update(command_mean=model.command_mean, command_std=model.command_std)
    actor, fit = fit_actor(cfg, model, ds, args.seed)
    actor.save(out / "actor.ckpt")
    write_json(out / "curve.json", {"train_mse": fit.train_mse, "val_mse": fit.val_mse,
                                    "best_epoch": fit.best_epoch})
    return {"inputs": {"jepa": hash_tree(args.jepa), "data": hash_tree(args.data)}}


def cmd_train_supervised(cfg, args, out: Path) -> dict:
    from .actor import train_supervised_baseline
    from .plant import load_dataset
    from .seeding import child_rng
    ds = load_dataset(_need(args, "data"))
    kappa = args.kappa or cfg.supervised_kappa
    model, fit = train_supervised_baseline(ds, kappa, cfg.supervised, child_rng(args.seed, "supervised"),
                                           cfg.augment, cfg.jepa.frame_hw)
    model.save(out / "supervised.ckpt")
    write_json(out / "curve.json", {"train_mse": fit.train_mse, "val_mse": fit.val_mse,
                                    "best_epoch": fit.best_epoch})
    return {"inputs": {"data": hash_tree(args.data)}}


def _models(cfg, args, stacks):
    from .actor import ActorModel, SupervisedModel
    from .jepa import JepaModel
    from .plant import design_controller
    from .sim import Models
    m = Models(cfg.plant, design_controller(cfg.plant), cfg.render, cfg.augment)
    inputs = {}
    if "ts-jepa" in stacks:
        m.jepa = JepaModel.load(_need(args, "jepa"))
        m.actor = ActorModel.load(_need(args, "actor"))
        inputs.update(jepa=hash_tree(args.jepa), actor=hash_tree(args.actor))
    if "supervised" in stacks:
        m.supervised = SupervisedModel.load(_need(args, "supervised"))
        inputs["supervised"] = hash_tree(args.supervised)
    return m, inputs


def cmd_simulate(cfg, args, out: Path) -> dict:
    from .sim import run_episode
    ep = replace(cfg.episode, seed=args.seed)
    models, inputs = _models(cfg, args, (ep.stack,))
    rep = run_episode(ep, models, cfg.radio, cfg.scheduler)
    rep.write_trace(out / "trace.csv")
    rep.write_control(out / "control.csv")
    write_json(out / "summary.json", rep.summary())
    log.info("norm_score %.4f bits %d", rep.norm_score, rep.total_bits)
    return {"inputs": inputs}


def cmd_sweep(cfg, args, out: Path) -> dict:
    from .sim import sweep
    sw = cfg.sweep
    models, inputs = _models(cfg, args, sw.stacks)
    res = sweep(replace(cfg.episode, seed=args.seed), models, sw.device_counts, sw.policies, sw.stacks,
                sw.n_seeds, sw.loss_probs, cfg.radio, cfg.scheduler, args.jobs, sw.band)
    res.write_csv(out / "sweep.csv")
    write_json(out / "summary.json", res.summary())
    return {"inputs": inputs}


def cmd_channel_test(cfg, args, out: Path) -> dict:
    from .channel import channel_test_points, outage_monte_carlo, outage_prob
    from .seeding import child_rng
    rng_pts = child_rng(args.seed, "channel-points")
    rng_mc = child_rng(args.seed, "channel-mc")
    rows = []
    for pl, p, w, rbar in channel_test_points(args.points, rng_pts):
        radio = replace(cfg.radio, tx_power_w=p, bandwidth_hz=w, rate_threshold_bps=rbar)
        eps = float(outage_prob(pl, radio))
        frac, se = outage_monte_carlo(pl, radio, args.samples, rng_mc)
        rows.append((pl, p, w, rbar, eps, frac, args.samples, se))
    with (out / "channel_test.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pl_db", "p_tx_w", "w_hz", "rbar_bps", "eps_closed_form", "eps_monte_carlo",
                     "n_samples", "std_err"])
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    bad = int(sum(abs(r[4] - r[5]) > 3 * r[7] for r in rows))
    log.info("%d/%d points outside 3 standard errors", bad, len(rows))
    return {"violations": bad}


def cmd_grad_check(cfg, args, out: Path) -> dict:
    from .neural import grad_check_suite
    from .seeding import child_rng
    rows = grad_check_suite(child_rng(args.seed, "grad-check"), args.compositions)
    with (out / "grad_check.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["case", "tensor", "error", "passed"])
        for case, tensor, err in rows:
            wr.writerow([case, tensor, repr(err), int(err <= 1e-4)])
    bad = int(sum(err > 1e-4 for _, _, err in rows))
    return {"violations": bad}


HANDLERS = {"gen-data": cmd_gen_data, "train-jepa": cmd_train_jepa, "train-actor": cmd_train_actor,
            "train-supervised": cmd_train_supervised, "simulate": cmd_simulate, "sweep": cmd_sweep,
            "channel-test": cmd_channel_test, "grad-check": cmd_grad_check}


# --------------------------------------------------------------------------- driver


def _resolve(args):
    """Returns (command, args namespace, resolved config) honouring --from-manifest."""
    if args.from_manifest:
        path = Path(args.from_manifest)
        if not path.exists():
            raise UsageError(f"--from-manifest: {str(path)!r} not found")
        man = json.loads(path.read_text())
        if man.get("command") != args.command:
            raise UsageError(f"manifest records command {man.get('command')!r}, not {args.command!r}")
        for k, v in man.get("args", {}).items():
            setattr(args, k, v)
        args.seed = man["seed"]
        return from_dict(man["config"])
    return load_config(args.config, list(args.set) + _episode_overrides(args))


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        raise UsageError("a subcommand is required")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg = _resolve(args)
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    extra = HANDLERS[args.command](cfg, args, out)
    top = out / "manifest.json"
    outputs = {str(p.relative_to(out)): sha256_file(p) for p in sorted(out.rglob("*"))
               if p.is_file() and p != top}
    manifest = {"command": args.command,
                "args": {k: getattr(args, k) for k in _ARG_KEYS if hasattr(args, k)},
                "config": to_dict(cfg), "seed": args.seed, "version": __version__,
                "outputs": outputs, "wall_clock_s": time.perf_counter() - t0, **extra}
    write_json(out / "manifest.json", manifest)
    violations = extra.get("violations", 0)
    if violations:
        print(f"{args.command}: {violations} check(s) failed", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
