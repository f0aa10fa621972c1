"""Verification and identification metrics for gallery/probe protocols."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .datamodel import DatasetManifest, subset
from .embedder import Checkpoint, embed_manifest


class MetricError(ValueError):
    pass


def pairwise_cosine(gallery, probe, block: int = 4096) -> np.ndarray:
    """G x P matrix of inner products between unit-norm rows, computed blockwise."""
    g = np.asarray(gallery, dtype=np.float64)
    p = np.asarray(probe, dtype=np.float64)
    if g.ndim != 2 or p.ndim != 2 or g.shape[1] != p.shape[1]:
        raise MetricError(f"dimension mismatch: gallery {g.shape}, probe {p.shape}")
    out = np.empty((len(g), len(p)))
    for i in range(0, len(g), block):
        out[i : i + block] = g[i : i + block] @ p.T
    return np.clip(out, -1.0, 1.0)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray


def build_scoreset(scores, gallery_ids: Sequence, probe_ids: Sequence) -> ScoreSet:
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gallery_ids)
    p = np.asarray(probe_ids)
    if s.shape != (len(g), len(p)):
        raise MetricError(f"score matrix {s.shape} does not match ids ({len(g)}, {len(p)})")
    same = g[:, None] == p[None, :]
    if not same.any():
        raise MetricError("no genuine pairs: gallery and probe share no identity")
    return ScoreSet(s[same], s[~same])


def far_threshold(s: ScoreSet, far: float) -> float:
    """Smallest impostor score ``t`` (or ``+inf``) with ``mean(impostor > t) <= far``."""
    imp = np.sort(np.asarray(s.impostor, dtype=np.float64))
    if np.asarray(s.genuine).size == 0 or imp.size == 0:
        raise MetricError("tar_at_far needs non-empty genuine and impostor scores")
    if not 0 < far < 1:
        raise MetricError(f"far must be in (0, 1), got {far}")
    if imp.size < 1.0 / far:
        warnings.warn(f"{imp.size} impostor scores cannot resolve FAR={far:g}", stacklevel=3)
    n = imp.size
    cand = np.unique(imp)
    above = n - np.searchsorted(imp, cand, side="right")
    ok = np.flatnonzero(above <= far * n)
    return float(cand[ok[0]]) if ok.size else float("inf")


def tar_at_far(s: ScoreSet, far: float) -> float:
    """True-accept rate at the threshold chosen by :func:`far_threshold`.

    Candidate thresholds are the impostor scores plus ``+inf``; the chosen
    threshold ``t`` is the smallest candidate with ``mean(impostor > t) <= far``
    and the result is ``mean(genuine > t)``.
    """
    t = far_threshold(s, far)
    gen = np.asarray(s.genuine, dtype=np.float64)
    return float(np.count_nonzero(gen > t) / gen.size)


def roc_points(s: ScoreSet):
    """(far, tar, threshold) arrays over all impostor-derived thresholds, ascending in threshold."""
    gen = np.sort(np.asarray(s.genuine, dtype=np.float64))
    imp = np.sort(np.asarray(s.impostor, dtype=np.float64))
    thr = np.append(np.unique(imp), np.inf)
    far = (imp.size - np.searchsorted(imp, thr, side="right")) / imp.size
    tar = (gen.size - np.searchsorted(gen, thr, side="right")) / gen.size
    return far, tar, thr


def rank_n(scores, gallery_ids: Sequence, probe_ids: Sequence, n: int) -> float:
    """Fraction of probes whose identity ranks within the top ``n`` gallery identities.

    Each gallery identity is scored by its best entry. A probe is a hit only
    if fewer than ``n`` other identities reach a score ``>=`` the true one.
    """
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gallery_ids)
    p = np.asarray(probe_ids)
    ids, inv = np.unique(g, return_inverse=True)
    missing = sorted(set(p.tolist()) - set(ids.tolist()))
    if missing:
        raise MetricError(f"probe identities absent from gallery: {missing[:5]}")
    if n < 1:
        raise MetricError("n must be >= 1")
    best = np.full((len(ids), s.shape[1]), -np.inf)
    np.maximum.at(best, inv, s)
    true_row = np.searchsorted(ids, p)
    cols = np.arange(len(p))
    true_score = best[true_row, cols]
    beaten = (best >= true_score[None, :]).sum(axis=0) - 1
    return float(np.mean(beaten < n))


@dataclass
class VerificationReport:
    tar_at: dict
    rank_n: dict
    counts: dict
    fold: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        out = {f"tar@{far:g}": v for far, v in self.tar_at.items()}
        out.update({f"rank{k}": v for k, v in self.rank_n.items()})
        return out

    def to_dict(self) -> dict:
        return {
            "tar_at": {f"{k:g}": v for k, v in self.tar_at.items()},
            "rank_n": {str(k): v for k, v in self.rank_n.items()},
            "counts": self.counts,
            "fold": self.fold,
            **self.extra,
        }

    def write(self, path, **extra):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True))
        return path


def verification_report(gallery_emb, gallery_ids, probe_emb, probe_ids, fars=(1e-4, 1e-3, 1e-2),
                        ranks=(1,), fold=None) -> VerificationReport:
    scores = pairwise_cosine(gallery_emb, probe_emb)
    ss = build_scoreset(scores, gallery_ids, probe_ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tars = {float(f): tar_at_far(ss, f) for f in fars}
    rk = {}
    if set(probe_ids) <= set(gallery_ids):
        rk = {int(k): rank_n(scores, gallery_ids, probe_ids, k) for k in ranks}
    counts = {"genuine": int(ss.genuine.size), "impostor": int(ss.impostor.size),
              "gallery": len(gallery_ids), "probe": len(probe_ids)}
    return VerificationReport(tars, rk, counts, fold)


def protocol_sets(manifest: DatasetManifest, probe_modality: str = "NIR", gallery_modality: str = "VIS"):
    """Gallery/probe subsets for a cross-modality (default VIS gallery, NIR probe) protocol."""
    return (subset(manifest, modality=gallery_modality, split="gallery"),
            subset(manifest, modality=probe_modality, split="probe"))


def evaluate_checkpoint(ckpt: Checkpoint, gallery: DatasetManifest, probe: DatasetManifest,
                        fars=(1e-4, 1e-3, 1e-2), ranks=(1,), crop_size: Optional[int] = None,
                        fold=None) -> VerificationReport:
    """Embed both sets deterministically (no augmentation) and score all gallery/probe pairs."""
    size = crop_size or ckpt.backbone_config.input_size
    model = ckpt.backbone()
    g = embed_manifest(model, gallery, size)
    p = embed_manifest(model, probe, size)
    return verification_report(g.vectors, g.identities, p.vectors, p.identities, fars, ranks, fold)


@dataclass
class CrossMatrix:
    rows: list
    cols: list
    values: np.ndarray
    far: float

    def cell(self, row, col) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(col)])

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["train \\ eval"] + list(self.cols))
            for r, vals in zip(self.rows, self.values):
                w.writerow([r] + [f"{v:.4f}" for v in vals])
        return path


def cross_dataset_matrix(checkpoints: Mapping[str, Checkpoint], datasets: Mapping[str, tuple],
                         far: float = 1e-4, baseline: Optional[Checkpoint] = None) -> CrossMatrix:
    """Cell (i, j): TAR@``far`` of the checkpoint fine-tuned on dataset i, evaluated on dataset j.

    ``datasets`` maps name -> (gallery, probe). A ``baseline`` checkpoint adds
    a final "no fine-tune" row.
    """
    dims = {c.backbone_config.embed_dim for c in checkpoints.values()}
    if baseline is not None:
        dims.add(baseline.backbone_config.embed_dim)
    if len(dims) > 1:
        raise MetricError(f"checkpoints disagree on embed_dim: {sorted(dims)}")
    rows = list(checkpoints)
    cols = list(datasets)
    entries = list(checkpoints.items())
    if baseline is not None:
        entries.append(("no fine-tune", baseline))
        rows.append("no fine-tune")
    values = np.zeros((len(entries), len(cols)))
    for i, (_, ckpt) in enumerate(entries):
        for j, name in enumerate(cols):
            gal, prb = datasets[name]
            values[i, j] = evaluate_checkpoint(ckpt, gal, prb, fars=(far,)).tar_at[float(far)]
    return CrossMatrix(rows, cols, values, far)


def aggregate_folds(reports: Sequence[VerificationReport]) -> dict:
    """metric -> (mean, population std) across folds."""
    if not reports:
        raise MetricError("aggregate_folds needs at least one report")
    keys = set(reports[0].metrics())
    for r in reports[1:]:
        if set(r.metrics()) != keys:
            raise MetricError("reports have inconsistent metric keys")
    out = {}
    for k in sorted(keys):
        vals = np.array([r.metrics()[k] for r in reports], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std()))
    return out
