"""Experiment configuration documents: defaults, overrides, validation and hashing.

A config is a nested JSON object. Defaults below are the desk-scale preset
used with the synthetic generator; the published large-scale recipe is
available through :class:`nirvis.trainer.TrainConfig` defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .augment import AugmentConfig
from .embedder import BackboneConfig
from .synthgen import SynthConfig
from .trainer import CLASSIFIER_REGIMES, REGULARIZERS, TrainConfig

DEFAULTS = {
    "name": "default",
    "seed": 0,
    "out_dir": "out",
    "crop_size": 16,
    "data": {
        "source": None,
        "target": None,
        "targets": {},
        "synth": {},
        "synth_b": {"nir_weights": [0.6, 0.3, 0.1], "nir_gain": 0.8, "nir_noise": 0.05, "seed_offset": 100},
    },
    "backbone": {"embed_dim": 32, "width": 16, "depth": 3},
    "aug": {"red_prob": 0.5, "hflip_prob": 0.0},
    "loss": {"margin_pretrain": 0.5, "margin_finetune": 0.6, "scale": 64.0},
    "pretrain": {
        "epochs": 20,
        "lr": 1e-3,
        "lr_schedule": "cosine",
        "batch": 64,
        "optimizer": "adam",
        "weight_decay": 5e-4,
        "red_aug": True,
        "include_target": False,
        "lambda": 1.0,
    },
    "finetune": {
        "checkpoint": None,
        "classifier": "mean",
        "regularizer": "none",
        "lambda": 0.0,
        "rct_weight": 1.0,
        "epochs": 20,
        "lr": 3e-3,
        "lr_decay_epochs": [10, 15, 20],
        "lr_decay_factor": 0.1,
        "batch_target": 32,
        "batch_source": 64,
        "optimizer": "adam",
        "weight_decay": 5e-4,
        "red_aug": False,
        "red_aug_source": True,
        "stratify_modality": False,
    },
    "eval": {
        "checkpoint": None,
        "fars": [1e-4, 1e-3, 1e-2],
        "ranks": [1, 5],
        "gallery_modality": "VIS",
        "probe_modality": "NIR",
        "gallery_split": "gallery",
        "probe_split": "probe",
    },
    "embed": {"checkpoint": None, "manifest": None, "modality": None, "split": None},
    "cross": {"checkpoints": {}, "baseline": None, "far": 1e-2},
    "reproduce": {"seeds": [0, 1, 2], "far": 1e-2, "source_tolerance": 0.02},
}

ENUMS = {
    "finetune.classifier": CLASSIFIER_REGIMES,
    "finetune.regularizer": REGULARIZERS,
    "finetune.optimizer": ("sgd", "adam"),
    "pretrain.optimizer": ("sgd", "adam"),
    "pretrain.lr_schedule": ("step", "cosine"),
    "eval.gallery_modality": ("VIS", "NIR"),
    "eval.probe_modality": ("VIS", "NIR"),
    "eval.gallery_split": ("train", "gallery", "probe"),
    "eval.probe_split": ("train", "gallery", "probe"),
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and out[k] and k not in ("targets", "checkpoints"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def get_key(cfg: dict, dotted: str):
    node = cfg
    for k in dotted.split("."):
        node = node[k]
    return node


def resolve(path=None, overrides=(), seed=None, out=None) -> dict:
    """Defaults < config file < ``--set`` overrides < ``--seed``/``--out``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), parse_value(v))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out_dir"] = out
    return cfg


def validate(cfg: dict, require_paths=()) -> None:
    """Raise :class:`ConfigError` listing every violation found."""
    problems = []
    for key, allowed in ENUMS.items():
        try:
            v = get_key(cfg, key)
        except (KeyError, TypeError):
            problems.append(f"{key}: missing")
            continue
        if v not in allowed:
            problems.append(f"{key}: {v!r} is not one of {list(allowed)}")
    checks = [
        (lambda: BackboneConfig(input_size=cfg["crop_size"], **cfg["backbone"]), "backbone"),
        (lambda: AugmentConfig(cfg["aug"]["red_prob"], cfg["aug"]["hflip_prob"]), "aug"),
        (lambda: SynthConfig(**synth_kwargs(cfg, "synth", 0)), "data.synth"),
        (lambda: SynthConfig(**synth_kwargs(cfg, "synth_b", 0)), "data.synth_b"),
    ]
    if not problems:
        checks += [(lambda: pretrain_config(cfg), "pretrain"), (lambda: finetune_config(cfg), "finetune")]
    for build, section in checks:
        try:
            build()
        except (TypeError, ValueError, KeyError) as exc:
            problems.append(f"{section}: {exc}")
    lam = cfg["finetune"].get("lambda")
    if not isinstance(lam, (int, float)) or lam < 0:
        problems.append(f"finetune.lambda: must be a number >= 0, got {lam!r}")
    for key in require_paths:
        try:
            v = get_key(cfg, key)
        except (KeyError, TypeError):
            v = None
        if not v:
            problems.append(f"{key}: required for this command")
        elif isinstance(v, dict):
            for name, p in v.items():
                if not Path(p).exists():
                    problems.append(f"{key}.{name}: path does not exist: {p}")
        elif not Path(v).exists():
            problems.append(f"{key}: path does not exist: {v}")
    if problems:
        raise ConfigError(problems)


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "out_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


def run_dir(cfg: dict) -> Path:
    return Path(cfg["out_dir"]) / cfg["name"] / config_hash(cfg)


def synth_kwargs(cfg: dict, section: str, seed: int) -> dict:
    kw = {}
    if section == "synth_b":
        kw.update({k: v for k, v in cfg["data"]["synth"].items()})
    kw.update(cfg["data"][section])
    offset = kw.pop("seed_offset", 0)
    kw.setdefault("image_size", cfg["crop_size"])
    kw["seed"] = seed + offset
    kw.setdefault("name", "B" if section == "synth_b" else "A")
    for k in ("nir_weights", "channel_signal"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return kw


def backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(input_size=cfg["crop_size"], **cfg["backbone"])


def pretrain_config(cfg: dict, seed=None, **kw) -> TrainConfig:
    p = cfg["pretrain"]
    base = dict(
        phase="pretrain", epochs=p["epochs"], lr_init=p["lr"], lr_schedule=p["lr_schedule"],
        lr_decay_epochs=(), batch_source=p["batch"], batch_target=p["batch"], optimizer=p["optimizer"],
        weight_decay=p["weight_decay"], margin=cfg["loss"]["margin_pretrain"], scale=cfg["loss"]["scale"],
        red_aug=p["red_aug"], red_prob=cfg["aug"]["red_prob"], hflip_prob=cfg["aug"]["hflip_prob"],
        lam=p["lambda"], crop_size=cfg["crop_size"], seed=cfg["seed"] if seed is None else seed,
    )
    base.update(kw)
    return TrainConfig(**base)


def finetune_config(cfg: dict, seed=None, **kw) -> TrainConfig:
    f = cfg["finetune"]
    base = dict(
        phase="finetune", epochs=f["epochs"], lr_init=f["lr"], lr_schedule="step",
        lr_decay_epochs=tuple(f["lr_decay_epochs"]), lr_decay_factor=f["lr_decay_factor"],
        batch_target=f["batch_target"], batch_source=f["batch_source"], optimizer=f["optimizer"],
        weight_decay=f["weight_decay"], margin=cfg["loss"]["margin_finetune"], scale=cfg["loss"]["scale"],
        red_aug=f["red_aug"], red_aug_source=f["red_aug_source"], red_prob=cfg["aug"]["red_prob"],
        hflip_prob=cfg["aug"]["hflip_prob"], lam=f["lambda"], classifier=f["classifier"],
        regularizer=f["regularizer"], rct_weight=f["rct_weight"], stratify_modality=f["stratify_modality"],
        crop_size=cfg["crop_size"], seed=cfg["seed"] if seed is None else seed,
    )
    base.update(kw)
    return TrainConfig(**base)
