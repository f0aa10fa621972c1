"""``nirvis`` command-line entry point.

Every command resolves one config document (defaults < ``--config`` file <
``--set`` overrides < ``--seed``/``--out``), validates it, and writes its
artifacts under ``<out>/<name>/<config-hash>/<command>/`` together with the
resolved ``config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import config as C
from .datamodel import ManifestError, load_manifest, subset
from .embedder import CheckpointError, Checkpoint, build_backbone, embed_manifest, load_checkpoint, \
    save_checkpoint, write_tensor_blob
from .evaluate import MetricError, cross_dataset_matrix, evaluate_checkpoint
from .experiments import reproduce_tables
from .heads import ClassifierError
from .synthgen import SynthConfig, config_dict, generate
from .trainer import RegimeError, TrainingError, finetune, pretrain

log = logging.getLogger("nirvis")

COMMANDS = ("synth-gen", "pretrain", "finetune", "embed", "eval-verify", "cross-eval", "reproduce-tables")


class CommandError(RuntimeError):
    pass


def _workdir(cfg: dict, command: str) -> Path:
    d = C.run_dir(cfg) / command
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps({"config_hash": C.config_hash(cfg), "config": cfg},
                                              indent=2, sort_keys=True))
    return d


def _write_json(path: Path, obj: dict, cfg: dict) -> Path:
    path.write_text(json.dumps({"config_hash": C.config_hash(cfg), **obj}, indent=2, sort_keys=True))
    return path


def cmd_synth_gen(cfg: dict, args) -> Path:
    C.validate(cfg)
    section = "synth_b" if args.variant == "B" else "synth"
    scfg = SynthConfig(**C.synth_kwargs(cfg, section, cfg["seed"]))
    out = _workdir(cfg, "synth-gen") / args.variant
    source, target = generate(scfg, out)
    _write_json(out / "synth.json", {"synth_config": config_dict(scfg), "source": str(out / "source.csv"),
                                     "target": str(out / "target.csv"), "n_source": len(source),
                                     "n_target": len(target)}, cfg)
    return out


def cmd_pretrain(cfg: dict, args) -> Path:
    need = ["data.source"] + (["data.target"] if cfg["pretrain"]["include_target"] else [])
    C.validate(cfg, need)
    source = load_manifest(cfg["data"]["source"])
    target = load_manifest(cfg["data"]["target"]) if cfg["pretrain"]["include_target"] else None
    out = _workdir(cfg, "pretrain")
    ckpt = pretrain(C.pretrain_config(cfg), source, target, backbone_cfg=C.backbone_config(cfg),
                    log_path=_fresh(out / "metrics.jsonl"))
    ckpt.metadata["config_hash"] = C.config_hash(cfg)
    return save_checkpoint(ckpt, out / "checkpoint")


def cmd_finetune(cfg: dict, args) -> Path:
    need = ["finetune.checkpoint", "data.target"] + (["data.source"] if cfg["finetune"]["lambda"] > 0 else [])
    C.validate(cfg, need)
    ckpt = load_checkpoint(cfg["finetune"]["checkpoint"], C.backbone_config(cfg))
    target = load_manifest(cfg["data"]["target"])
    source = load_manifest(cfg["data"]["source"]) if cfg["data"]["source"] else None
    out = _workdir(cfg, "finetune")
    ft = finetune(C.finetune_config(cfg), ckpt, target, source, log_path=_fresh(out / "metrics.jsonl"))
    ft.metadata["config_hash"] = C.config_hash(cfg)
    return save_checkpoint(ft, out / "checkpoint")


def _checkpoint_or_random(cfg: dict, path) -> Checkpoint:
    if path:
        return load_checkpoint(path, C.backbone_config(cfg))
    log.warning("no checkpoint given; using a randomly initialized backbone")
    return Checkpoint.from_model(build_backbone(C.backbone_config(cfg), cfg["seed"]), phase="random")


def cmd_embed(cfg: dict, args) -> Path:
    e = cfg["embed"]
    C.validate(cfg, ["embed.manifest"] + (["embed.checkpoint"] if e["checkpoint"] else []))
    ckpt = _checkpoint_or_random(cfg, e["checkpoint"])
    manifest = subset(load_manifest(e["manifest"]), modality=e["modality"], split=e["split"])
    emb = embed_manifest(ckpt.backbone(), manifest, cfg["crop_size"])
    out = _workdir(cfg, "embed")
    digest = write_tensor_blob(out / "embeddings.bin", OrderedDict(embeddings=emb.vectors.astype(np.float32)))
    _write_json(out / "embeddings.json", {"identities": list(emb.identities), "modalities": list(emb.modalities),
                                          "paths": [r.path for r in manifest.records],
                                          "embeddings_sha256": digest}, cfg)
    return out


def cmd_eval_verify(cfg: dict, args) -> Path:
    e = cfg["eval"]
    C.validate(cfg, ["data.target"] + (["eval.checkpoint"] if e["checkpoint"] else []))
    ckpt = _checkpoint_or_random(cfg, e["checkpoint"])
    m = load_manifest(cfg["data"]["target"])
    gallery = subset(m, modality=e["gallery_modality"], split=e["gallery_split"])
    probe = subset(m, modality=e["probe_modality"], split=e["probe_split"])
    rep = evaluate_checkpoint(ckpt, gallery, probe, fars=tuple(e["fars"]), ranks=tuple(e["ranks"]),
                              crop_size=cfg["crop_size"])
    out = _workdir(cfg, "eval-verify")
    rep.write(out / "report.json", config_hash=C.config_hash(cfg), checkpoint=e["checkpoint"],
              protocol=f"{e['gallery_modality']}-{e['gallery_split']} vs {e['probe_modality']}-{e['probe_split']}")
    return out


def cmd_cross_eval(cfg: dict, args) -> Path:
    x, e = cfg["cross"], cfg["eval"]
    C.validate(cfg, ["cross.checkpoints", "data.targets"] + (["cross.baseline"] if x["baseline"] else []))
    bb = C.backbone_config(cfg)
    ckpts = {name: load_checkpoint(p, bb) for name, p in x["checkpoints"].items()}
    datasets = {}
    for name, p in cfg["data"]["targets"].items():
        m = load_manifest(p)
        datasets[name] = (subset(m, modality=e["gallery_modality"], split=e["gallery_split"]),
                          subset(m, modality=e["probe_modality"], split=e["probe_split"]))
    baseline = load_checkpoint(x["baseline"], bb) if x["baseline"] else None
    mat = cross_dataset_matrix(ckpts, datasets, float(x["far"]), baseline)
    out = _workdir(cfg, "cross-eval")
    mat.to_csv(out / "matrix.csv")
    _write_json(out / "report.json", {"far": mat.far, "rows": mat.rows, "cols": mat.cols,
                                      "values": mat.values.tolist()}, cfg)
    return out


def cmd_reproduce_tables(cfg: dict, args) -> Path:
    C.validate(cfg)
    out = _workdir(cfg, "reproduce-tables")
    res = reproduce_tables(cfg, out)
    sys.stdout.write((out / "checks.txt").read_text())
    if not all(p for _, p, _ in res["checks"]):
        log.warning("some direction checks failed; see %s", out / "checks.txt")
    return out


def _fresh(path: Path) -> Path:
    if path.exists():
        path.unlink()
    return path


HANDLERS = {
    "synth-gen": cmd_synth_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "eval-verify": cmd_eval_verify,
    "cross-eval": cmd_cross_eval,
    "reproduce-tables": cmd_reproduce_tables,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable); VALUE is parsed as JSON when possible")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output root (default from config: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nirvis", description="NIR-VIS face recognition transfer experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "synth-gen":
            p.add_argument("--variant", choices=("A", "B"), default="A",
                           help="A uses data.synth, B applies data.synth_b on top")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.resolve(args.config, args.set, args.seed, args.out)
        out = HANDLERS[args.command](cfg, args)
    except C.ConfigError as exc:
        print(f"nirvis {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, CheckpointError, RegimeError, ClassifierError, MetricError, TrainingError,
            CommandError, OSError, ValueError, KeyError) as exc:
        print(f"nirvis {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
