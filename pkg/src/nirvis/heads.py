"""Cosine classifiers, the additive angular margin loss and the fine-tuning objectives.

Classifier matrices are ``d x C`` with unit-norm columns; column ``c`` is the
class center of identity label ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import JointLabelMap

UNIT_TOL = 1e-3


class ClassifierError(ValueError):
    pass


@dataclass
class ClassifierWeights:
    matrix: np.ndarray
    identities: list  # identities[c] owns column c
    frozen: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        self.identities = list(self.identities)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.identities):
            raise ClassifierError(
                f"matrix shape {self.matrix.shape} does not match {len(self.identities)} identities"
            )
        if len(set(self.identities)) != len(self.identities):
            raise ClassifierError("duplicate identities in classifier")

    @property
    def identity_map(self) -> dict:
        return {ident: c for c, ident in enumerate(self.identities)}

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[1]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.matrix, dtype=dtype)


@dataclass(frozen=True)
class MarginConfig:
    margin: float = 0.5
    scale: float = 64.0

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi:
            raise ValueError(f"margin must be in [0, pi), got {self.margin}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def _check_unit(x: torch.Tensor, dim: int, what: str):
    norms = x.detach().norm(dim=dim)
    if norms.numel() and (norms - 1).abs().max() > UNIT_TOL:
        raise ClassifierError(f"{what} must be unit-norm (max deviation {(norms - 1).abs().max():.2e})")


def arcface_logits(embeddings: torch.Tensor, weight: torch.Tensor, labels: torch.Tensor,
                   cfg: MarginConfig) -> torch.Tensor:
    """``s*cos(theta_y + m)`` for the true class, ``s*cos(theta_j)`` elsewhere."""
    cos = embeddings @ weight
    if cfg.margin == 0:
        return cfg.scale * cos
    cos_y = cos.gather(1, labels[:, None]).squeeze(1)
    sin_y = torch.sqrt((1.0 - cos_y * cos_y).clamp_min(1e-12))
    phi = cos_y * math.cos(cfg.margin) - sin_y * math.sin(cfg.margin)
    # theta + m >= pi would make cos(theta + m) non-monotone in theta
    phi = torch.where(cos_y > math.cos(math.pi - cfg.margin), phi, cos_y - cfg.margin * math.sin(cfg.margin))
    one_hot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
    return cfg.scale * (cos + one_hot * (phi - cos_y)[:, None])


def arcface_loss(embeddings: torch.Tensor, classifier, labels, cfg: MarginConfig):
    """Mean cross-entropy over margin logits. Returns ``(loss, logits)``.

    ``classifier`` is a :class:`ClassifierWeights` or a ``d x C`` tensor with
    unit-norm columns; ``embeddings`` must have unit-norm rows.
    """
    weight = classifier.tensor(embeddings.dtype) if isinstance(classifier, ClassifierWeights) else classifier
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_unit(embeddings, 1, "embeddings")
    _check_unit(weight, 0, "classifier columns")
    n_classes = weight.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ClassifierError(f"labels must lie in [0, {n_classes})")
    logits = arcface_logits(embeddings, weight, labels, cfg)
    return F.cross_entropy(logits, labels), logits


def mean_classifier_init(embeddings, labels: Sequence[int], n_classes: int,
                         identities: Optional[Sequence[str]] = None) -> ClassifierWeights:
    """Frozen classifier whose column ``c`` is the normalized sum of class-``c`` embeddings."""
    emb = np.asarray(embeddings)
    labels = np.asarray(labels)
    if emb.ndim != 2 or len(emb) != len(labels):
        raise ClassifierError("embeddings and labels must be row-aligned")
    counts = np.bincount(labels, minlength=n_classes)
    empty = np.flatnonzero(counts[:n_classes] == 0)
    if len(empty):
        raise ClassifierError(f"classes without samples: {empty.tolist()}")
    if len(counts) > n_classes:
        raise ClassifierError(f"labels must lie in [0, {n_classes})")
    sums = np.zeros((n_classes, emb.shape[1]), dtype=emb.dtype)
    np.add.at(sums, labels, emb)
    norms = np.linalg.norm(sums, axis=1)
    degenerate = np.flatnonzero(norms <= 1e-6 * counts)
    if len(degenerate):
        raise ClassifierError(f"class means with zero norm: {degenerate.tolist()}")
    matrix = (sums / norms[:, None]).T.copy()
    ids = list(identities) if identities is not None else [str(c) for c in range(n_classes)]
    return ClassifierWeights(matrix, ids, frozen=True)


def subspace_extract(joint_classifier: ClassifierWeights, joint_map: JointLabelMap) -> ClassifierWeights:
    """Target-identity columns of a joint classifier, reindexed ``0..C_tgt-1``."""
    if joint_classifier.n_classes != len(joint_map):
        raise ClassifierError(
            f"joint classifier has {joint_classifier.n_classes} columns, label map has {len(joint_map)}"
        )
    cols = joint_map.target_columns()
    return ClassifierWeights(joint_classifier.matrix[:, cols].copy(), list(joint_map.target_ids), frozen=True)


def source_block(joint_classifier: ClassifierWeights, joint_map: JointLabelMap) -> ClassifierWeights:
    cols = [joint_map.joint_index[s] for s in joint_map.source_ids]
    return ClassifierWeights(joint_classifier.matrix[:, cols].copy(), list(joint_map.source_ids), frozen=True)


def rct_penalty(params: Mapping[str, torch.Tensor], snapshot: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Sum of squared deviations from a parameter snapshot over shared names."""
    total = None
    for name, p in params.items():
        if name not in snapshot:
            continue
        p0 = snapshot[name]
        if p.shape != p0.shape:
            raise ClassifierError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(p0.shape)}")
        term = ((p - p0.to(p.dtype)) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        raise ClassifierError("no shared parameters between params and snapshot")
    return total


@dataclass
class LossBreakdown:
    l_target: float
    l_source: float
    lam: float
    l_total: float
    rct: Optional[float] = None
    total: Optional[torch.Tensor] = None  # differentiable total


def joint_finetune_loss(l_target, l_source, lam: float, rct=None, rct_weight: float = 1.0) -> LossBreakdown:
    """``l_target + lam * l_source`` (plus ``rct_weight * rct`` when given).

    With ``lam == 0`` the source term is dropped entirely, so no gradient
    reaches the source branch.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    total = l_target
    if lam > 0:
        if l_source is None:
            raise ValueError("lambda > 0 requires a source loss")
        total = total + lam * l_source
    if rct is not None:
        total = total + rct_weight * rct
    def as_float(v):
        if v is None:
            return None
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    return LossBreakdown(
        l_target=as_float(l_target),
        l_source=as_float(l_source) if l_source is not None else 0.0,
        lam=float(lam),
        l_total=as_float(total),
        rct=as_float(rct),
        total=total if isinstance(total, torch.Tensor) else None,
    )
