"""Desk-scale analogues of the zero-shot, fine-tuning and cross-dataset tables.

Everything runs on two synthetic target datasets ``A`` and ``B`` that share
the source VIS data but differ in their NIR sensor transform. Per seed:

* four pre-trainings: base, +red aug., and +target for each of A and B
* per target dataset: naive fine-tuning (from scratch and from the
  pre-trained backbone) plus mean/subspace classifiers under RCT, lambda=0
  and lambda=1
* all checkpoints are scored on the VIS-gallery / NIR-probe protocol of A
  and B, on their VIS-gallery / VIS-probe protocol, and on the source
  VIS-VIS protocol

Tables report medians over seeds; qualitative direction checks are
evaluated on those medians.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as C
from .datamodel import DatasetManifest, subset
from .embedder import Checkpoint, build_backbone
from .evaluate import evaluate_checkpoint
from .synthgen import SynthConfig, generate
from .trainer import finetune, pretrain

log = logging.getLogger(__name__)

DATASETS = ("A", "B")
TABLE2_COLS = ("base", "+red aug.", "+target")
NAIVE_COLS = ("✗/✓", "✓/✗", "✓/✓")
REG_COLS = ("RCT", "λ=0", "λ=1")


@dataclass
class SeedData:
    source: DatasetManifest
    targets: dict  # name -> target manifest


def _tar(ckpt: Checkpoint, gallery, probe, far: float) -> float:
    return evaluate_checkpoint(ckpt, gallery, probe, fars=(far,)).tar_at[float(far)]


def protocols(data: SeedData, cfg: dict) -> dict:
    e = cfg["eval"]
    out = {}
    for name, tgt in data.targets.items():
        gallery = subset(tgt, modality=e["gallery_modality"], split="gallery")
        out[name] = (gallery, subset(tgt, modality=e["probe_modality"], split="probe"))
        # same-modality reference for the size of the domain gap
        out[f"{name}-VIS"] = (gallery, subset(tgt, modality="VIS", split="probe"))
    out["source"] = (subset(data.source, split="gallery"), subset(data.source, split="probe"))
    return out


def make_data(cfg: dict, seed: int, root: Path) -> SeedData:
    a = SynthConfig(**C.synth_kwargs(cfg, "synth", seed))
    b = SynthConfig(**C.synth_kwargs(cfg, "synth_b", seed))
    src, tgt_a = generate(a, root / f"seed{seed}" / "A")
    _, tgt_b = generate(b, root / f"seed{seed}" / "B")
    return SeedData(src, {"A": tgt_a, "B": tgt_b})


def run_seed(cfg: dict, seed: int, root: Path) -> dict:
    """Train every configuration for one seed; return ``{run: {protocol: TAR}}``."""
    far = float(cfg["reproduce"]["far"])
    data = make_data(cfg, seed, root)
    prot = protocols(data, cfg)
    bb = C.backbone_config(cfg)
    results: dict = {}

    def score(run: str, ckpt: Checkpoint):
        results[run] = {p: _tar(ckpt, g, q, far) for p, (g, q) in prot.items()}

    t0 = time.perf_counter()
    base = pretrain(C.pretrain_config(cfg, seed, red_aug=False), data.source, backbone_cfg=bb)
    aug = pretrain(C.pretrain_config(cfg, seed, red_aug=True), data.source, backbone_cfg=bb)
    score("pretrain/base", base)
    score("pretrain/aug", aug)
    scratch = Checkpoint.from_model(build_backbone(bb, seed), phase="pretrain", epoch=0)

    for name in DATASETS:
        tgt = data.targets[name]
        joint = pretrain(C.pretrain_config(cfg, seed, red_aug=True), data.source, tgt, backbone_cfg=bb)
        score(f"pretrain/target-{name}", joint)
        runs = {
            "naive-scratch": (scratch, dict(classifier="naive", lam=0.0, regularizer="none")),
            "naive": (aug, dict(classifier="naive", lam=0.0, regularizer="none")),
            "mean-rct": (aug, dict(classifier="mean", lam=0.0, regularizer="rct")),
            "mean-l0": (aug, dict(classifier="mean", lam=0.0, regularizer="none")),
            "mean-l1": (aug, dict(classifier="mean", lam=1.0, regularizer="none")),
            "subspace-rct": (joint, dict(classifier="subspace", lam=0.0, regularizer="rct")),
            "subspace-l0": (joint, dict(classifier="subspace", lam=0.0, regularizer="none")),
            "subspace-l1": (joint, dict(classifier="subspace", lam=1.0, regularizer="none")),
        }
        for run, (start, kw) in runs.items():
            ft = finetune(C.finetune_config(cfg, seed, **kw), start, tgt, data.source)
            score(f"{name}/{run}", ft)
    log.info("seed %d done in %.1fs", seed, time.perf_counter() - t0)
    return results


def _median(per_seed: list, run: str, prot: str) -> float:
    return float(np.median([r[run][prot] for r in per_seed]))


def build_tables(per_seed: list) -> dict:
    m = lambda run, prot: _median(per_seed, run, prot)  # noqa: E731
    t2 = {f"{d} {c}": m(run, d) for d in DATASETS
          for c, run in zip(TABLE2_COLS, ("pretrain/base", "pretrain/aug", f"pretrain/target-{d}"))}
    t3 = []
    for d in DATASETS:
        t3.append(("Naive", d, [m(f"{d}/naive-scratch", d), m("pretrain/aug", d), m(f"{d}/naive", d)]))
        t3.append(("Mean", d, [m(f"{d}/mean-rct", d), m(f"{d}/mean-l0", d), m(f"{d}/mean-l1", d)]))
        t3.append(("Subspace", d, [m(f"{d}/subspace-rct", d), m(f"{d}/subspace-l0", d), m(f"{d}/subspace-l1", d)]))
    t4 = {}
    for tr in DATASETS:
        for ev in DATASETS:
            t4[(tr, ev)] = (m(f"{tr}/mean-l0", ev), m(f"{tr}/mean-l1", ev))
    for ev in DATASETS:
        t4[("no fine-tune", ev)] = (m("pretrain/aug", ev),)
    return {"table2": t2, "table3": t3, "table4": t4}


def direction_checks(per_seed: list, tolerance: float = 0.02) -> list:
    """(criterion, passed, detail) for each qualitative direction, on seed medians."""
    m = lambda run, prot: _median(per_seed, run, prot)  # noqa: E731
    checks = []
    b, a = m("pretrain/base", "A"), m("pretrain/aug", "A")
    checks.append(("zero-shot NIR: +red aug >= base", a >= b, f"{a:.4f} vs {b:.4f}"))

    src0 = m("pretrain/aug", "source")
    naive_src = m("A/naive", "source")
    checks.append(("naive fine-tuning lowers source VIS-VIS TAR", naive_src < src0,
                   f"{naive_src:.4f} vs pre-trained {src0:.4f}"))
    l1_tgt, zs = m("A/mean-l1", "A"), m("pretrain/aug", "A")
    checks.append(("mean, lambda=1 improves target NIR-VIS TAR over zero-shot", l1_tgt > zs,
                   f"{l1_tgt:.4f} vs {zs:.4f}"))
    l1_src = m("A/mean-l1", "source")
    checks.append((f"mean, lambda=1 keeps source TAR within {tolerance:g}", l1_src >= src0 - tolerance,
                   f"{l1_src:.4f} vs {src0:.4f}"))
    for tr, ev in (("A", "B"), ("B", "A")):
        l0, l1 = m(f"{tr}/mean-l0", ev), m(f"{tr}/mean-l1", ev)
        checks.append((f"cross-dataset {tr}->{ev}: lambda=1 >= lambda=0", l1 >= l0, f"{l1:.4f} vs {l0:.4f}"))
    return checks


def write_tables(tables: dict, out: Path, seeds, far: float):
    out.mkdir(parents=True, exist_ok=True)
    fmt = lambda v: f"{100 * v:.2f}"  # noqa: E731
    with open(out / "table2.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [f"{d} {c}" for d in DATASETS for c in TABLE2_COLS])
        w.writerow([f"default (median of {len(seeds)} seeds, TAR@FAR={far:g})"]
                   + [fmt(tables["table2"][f"{d} {c}"]) for d in DATASETS for c in TABLE2_COLS])
    with open(out / "table3.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "dataset", "col1", "col2", "col3"])
        for block, d, vals in tables["table3"]:
            cols = NAIVE_COLS if block == "Naive" else REG_COLS
            w.writerow([block, d] + [f"{c}={fmt(v)}" for c, v in zip(cols, vals)])
    with open(out / "table4.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["training \\ evaluation"] + list(DATASETS))
        for tr in list(DATASETS) + ["no fine-tune"]:
            w.writerow([tr] + [" / ".join(fmt(v) for v in tables["table4"][(tr, ev)]) for ev in DATASETS])


def reproduce_tables(cfg: dict, out: Path) -> dict:
    """Run all seeds, write ``table{2,3,4}.csv``, ``runs.json`` and ``checks.{json,txt}``."""
    out = Path(out)
    seeds = list(cfg["reproduce"]["seeds"])
    far = float(cfg["reproduce"]["far"])
    t0 = time.perf_counter()
    per_seed = [run_seed(cfg, s, out / "data") for s in seeds]
    tables = build_tables(per_seed)
    checks = direction_checks(per_seed, cfg["reproduce"]["source_tolerance"])
    write_tables(tables, out, seeds, far)
    (out / "runs.json").write_text(json.dumps({str(s): r for s, r in zip(seeds, per_seed)}, indent=1, sort_keys=True))
    (out / "checks.json").write_text(json.dumps(
        [{"check": n, "passed": bool(p), "detail": d} for n, p, d in checks], indent=1))
    lines = [f"{'PASS' if p else 'FAIL'}  {n}  ({d})" for n, p, d in checks]
    (out / "checks.txt").write_text("\n".join(lines) + "\n")
    elapsed = time.perf_counter() - t0
    (out / "timing.json").write_text(json.dumps({"seconds": elapsed}))
    return {"per_seed": per_seed, "tables": tables, "checks": checks, "seconds": elapsed}
