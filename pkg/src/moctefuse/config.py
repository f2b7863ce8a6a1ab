"""Run configuration: one defaults table, an INI-style override file, CLI flags on top.

File format (``key = value`` lines grouped in sections)::

    [gate]
    widths = 64,128,256,512
    [fusion]
    channels = 16
    depth = 2
    [train]
    lr = 1e-4
    [train-gate]
    epochs = 10

``[train-gate]`` and ``[train-fuse]`` override ``[train]`` for their stage.
"""
from __future__ import annotations

import configparser
import copy

from .fusion import FusionConfig
from .gate import GateConfig
from .losses import LossWeights
from .trainer import TrainConfig

DEFAULTS = {
    "gate": {"widths": "64,128,256,512", "blocks": "2,2,2,2", "in_channels": "3", "input_size": ""},
    "fusion": {"channels": "16", "depth": "2", "window": "8", "heads": "2", "ffn_ratio": "2",
               "n_rtb": "1", "n_rdb": "1", "slope": "0.2"},
    "train": {"epochs": "60", "batch_size": "8", "lr": "1e-4", "min_lr": "1e-6",
              "warmup_epochs": "3", "seed": "0", "crop": "128", "resize": "false", "max_steps": ""},
    "train-gate": {"val_fraction": "0.0"},
    "train-fuse": {},
    "loss": {"alpha": "1", "beta": "5", "gamma": "10", "w1": "0.5", "w2": "0.5"},
}


def load(path=None, overrides=None):
    """Merge defaults <- file <- ``overrides`` ({section: {key: value}})."""
    merged = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in merged:
                raise ValueError(f"unknown config section [{section}]")
            for key, val in parser.items(section):
                merged[section][key] = val
    for section, vals in (overrides or {}).items():
        for key, val in vals.items():
            if val is not None:
                merged[section][key] = str(val)
    return merged


def _ints(s):
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _bool(s):
    return str(s).strip().lower() in ("1", "true", "yes", "on")


def gate_config(conf):
    g = conf["gate"]
    size = _ints(g["input_size"]) if g.get("input_size") else None
    return GateConfig(widths=_ints(g["widths"]), blocks=_ints(g["blocks"]),
                      in_channels=int(g["in_channels"]), input_size=size)


def fusion_config(conf):
    f = conf["fusion"]
    return FusionConfig(channels=int(f["channels"]), depth=int(f["depth"]), window=int(f["window"]),
                        heads=int(f["heads"]), ffn_ratio=int(f["ffn_ratio"]), n_rtb=int(f["n_rtb"]),
                        n_rdb=int(f["n_rdb"]), slope=float(f["slope"]))


def train_config(conf, stage):
    t = dict(conf["train"])
    t.update({k: v for k, v in conf.get(stage, {}).items() if k in t})
    return TrainConfig(
        epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), lr=float(t["lr"]),
        min_lr=float(t["min_lr"]), warmup_epochs=float(t["warmup_epochs"]), seed=int(t["seed"]),
        crop=int(t["crop"]), resize=_bool(t["resize"]),
        max_steps=int(t["max_steps"]) if t.get("max_steps") else None,
    )


def loss_weights(conf):
    w = conf["loss"]
    return LossWeights(alpha=float(w["alpha"]), beta=float(w["beta"]), gamma=float(w["gamma"]),
                       w1=float(w["w1"]), w2=float(w["w2"]))
