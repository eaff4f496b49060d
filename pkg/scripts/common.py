"""Helpers shared by the experiment scripts."""

from pathlib import Path

from tsjepa.actor import ActorModel, SupervisedModel
from tsjepa.jepa import JepaModel
from tsjepa.plant import design_controller
from tsjepa.sim import Models


def load_models(run_dir, cfg) -> Models:
    run = Path(run_dir)
    return Models(cfg.plant, design_controller(cfg.plant), cfg.render, cfg.augment,
                  JepaModel.load(run / "jepa"), ActorModel.load(run / "actor.ckpt"),
                  SupervisedModel.load(run / "supervised.ckpt"))
