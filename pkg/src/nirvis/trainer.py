"""Pre-training and fine-tuning loops.

Pre-training fits a cosine classifier with the angular-margin loss on source
VIS identities, optionally merged with target identities, under red-channel
augmentation. Fine-tuning starts from a pre-trained checkpoint and trains on
target NIR-VIS data with one of three classifier regimes (naive, mean,
subspace), optionally mixing in source batches and/or an RCT penalty.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, augment_batch
from .datamodel import DatasetManifest, JointLabelMap, merge_identity_spaces, rename_target_identity, subset
from .embedder import BackboneConfig, Checkpoint, build_backbone, embed
from .heads import (
    ClassifierWeights,
    MarginConfig,
    arcface_loss,
    joint_finetune_loss,
    mean_classifier_init,
    rct_penalty,
    source_block,
    subspace_extract,
)
from .preprocess import load_tensor

log = logging.getLogger(__name__)

CLASSIFIER_REGIMES = ("naive", "mean", "subspace")
REGULARIZERS = ("none", "rct")


class TrainingError(RuntimeError):
    pass


class RegimeError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one phase. Defaults are the published fine-tuning recipe."""

    phase: str = "finetune"
    epochs: int = 20
    lr_init: float = 1e-4
    lr_schedule: str = "step"  # "step" or "cosine"
    lr_decay_epochs: tuple = (10, 15, 20)
    lr_decay_factor: float = 0.1
    batch_target: int = 64
    batch_source: int = 512
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    margin: float = 0.6
    scale: float = 64.0
    red_aug: bool = False
    red_aug_source: bool = False  # fine-tuning: augment the source stream as in pre-training
    red_prob: float = 0.5
    hflip_prob: float = 0.5
    lam: float = 0.0
    classifier: str = "mean"
    regularizer: str = "none"
    rct_weight: float = 1.0
    stratify_modality: bool = False
    crop_size: int = 112
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(sorted(int(e) for e in self.lr_decay_epochs)))
        errors = []
        if self.phase not in ("pretrain", "finetune"):
            errors.append(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_target < 1 or self.batch_source < 1:
            errors.append("batch sizes must be >= 1")
        # decay points past the last epoch are allowed and simply never fire
        if any(e < 1 for e in self.lr_decay_epochs):
            errors.append("lr_decay_epochs must be >= 1")
        if self.lr_schedule not in ("step", "cosine"):
            errors.append(f"lr_schedule must be step or cosine, got {self.lr_schedule!r}")
        if self.classifier not in CLASSIFIER_REGIMES:
            errors.append(f"classifier must be one of {CLASSIFIER_REGIMES}, got {self.classifier!r}")
        if self.regularizer not in REGULARIZERS:
            errors.append(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.lam < 0:
            errors.append("lam must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            errors.append(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        base = dict(phase="pretrain", epochs=24, lr_init=0.1, lr_schedule="cosine", lr_decay_epochs=(),
                    batch_source=512, margin=0.5, red_aug=True, lam=1.0)
        base.update(kw)
        return cls(**base)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate used throughout 1-based ``epoch``."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if cfg.lr_schedule == "cosine":
        return cfg.lr_init * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
    k = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr_init * cfg.lr_decay_factor**k


class CosineHead(nn.Module):
    """Classifier columns; trainable heads are renormalized on every forward."""

    def __init__(self, weights: ClassifierWeights):
        super().__init__()
        w = torch.from_numpy(np.array(weights.matrix, dtype=np.float32))
        self.frozen = weights.frozen
        self.identities = list(weights.identities)
        if self.frozen:
            self.register_buffer("weight", w)
        else:
            self.weight = nn.Parameter(w)

    def normalized(self) -> torch.Tensor:
        return self.weight if self.frozen else F.normalize(self.weight, dim=0)

    def export(self) -> ClassifierWeights:
        return ClassifierWeights(self.normalized().detach().numpy().copy(), self.identities, self.frozen)


def random_classifier(dim: int, identities, seed: int) -> ClassifierWeights:
    g = torch.Generator().manual_seed(seed)
    w = F.normalize(torch.randn(dim, len(identities), generator=g), dim=0)
    return ClassifierWeights(w.numpy(), list(identities), frozen=False)


def _train_records(m: DatasetManifest) -> DatasetManifest:
    return subset(m, split="train")


class Stream:
    """Endless seeded shuffle over row indices."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self._perm, self._pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch
        while need:
            take = min(need, self.n - self._pos)
            out.append(self._perm[self._pos : self._pos + take])
            self._pos += take
            need -= take
            if self._pos == self.n:
                self._perm, self._pos = self.rng.permutation(self.n), 0
        return np.concatenate(out)


def _seed_all(seed: int):
    torch.manual_seed(seed)


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr_init)
    return torch.optim.SGD(params, lr=cfg.lr_init, momentum=cfg.momentum)


def _step_loss_check(loss: torch.Tensor, epoch: int, step: int, phase: str):
    if not torch.isfinite(loss):
        raise TrainingError(f"{phase}: non-finite loss at epoch {epoch}, step {step}")


def _decay_groups(backbone: nn.Module, heads, cfg: TrainConfig):
    params = [{"params": list(backbone.parameters()), "weight_decay": cfg.weight_decay}]
    trainable = [h.weight for h in heads if not h.frozen]
    if trainable:
        params.append({"params": trainable, "weight_decay": 0.0})
    return params


def _apply_lr(opt, lr: float):
    for g in opt.param_groups:
        g["lr"] = lr


def pretrain(cfg: TrainConfig, source: DatasetManifest, target: Optional[DatasetManifest] = None,
             backbone_cfg: Optional[BackboneConfig] = None, log_path=None) -> Checkpoint:
    """Train backbone + classifier on source (optionally merged with target) train splits."""
    backbone_cfg = backbone_cfg or BackboneConfig(input_size=cfg.crop_size)
    src = _train_records(source)
    x_src = load_tensor(src, cfg.crop_size)
    y_src = np.asarray(src.labels())
    joint: Optional[JointLabelMap] = None
    if target is not None:
        tgt = _train_records(target)
        joint = merge_identity_spaces(src, tgt)
        x = np.concatenate([x_src, load_tensor(tgt, cfg.crop_size)])
        src_set = set(src.identity_index)
        y_tgt = [joint.joint_index[rename_target_identity(r.identity, src_set)] for r in tgt.records]
        y = np.concatenate([y_src, np.asarray(y_tgt)])
        ids = list(joint.source_ids) + list(joint.target_ids)
        weight = np.concatenate([np.ones(len(y_src)), np.full(len(y_tgt), cfg.lam)])
    else:
        x, y, ids = x_src, y_src, src.identities
        weight = np.ones(len(y))
    reweight = target is not None and cfg.lam != 1.0

    _seed_all(cfg.seed)
    model = build_backbone(backbone_cfg, cfg.seed)
    head = CosineHead(random_classifier(backbone_cfg.embed_dim, ids, cfg.seed + 1))
    opt = _optimizer(_decay_groups(model, [head], cfg), cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    aug_rng = np.random.default_rng([cfg.seed, 12])
    aug = AugmentConfig(cfg.red_prob, cfg.hflip_prob, cfg.seed)
    mcfg = MarginConfig(cfg.margin, cfg.scale)
    records, step = [], 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        _apply_lr(opt, lr)
        perm = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), cfg.batch_source):
            idx = perm[i : i + cfg.batch_source]
            xb = augment_batch(x[idx], aug_rng, aug, red=cfg.red_aug)
            emb = F.normalize(model(torch.from_numpy(xb)), dim=1)
            yb = torch.from_numpy(y[idx])
            loss, logits = arcface_loss(emb, head.normalized(), yb, mcfg)
            if reweight:
                # target identities weighted by lam within the joint softmax
                wb = torch.from_numpy(weight[idx]).to(logits.dtype)
                loss = (F.cross_entropy(logits, yb, reduction="none") * wb).sum() / len(idx)
            step += 1
            _step_loss_check(loss, epoch, step, "pretrain")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        records.append({"phase": "pretrain", "epoch": epoch, "step": step,
                        "loss_target": None, "loss_source": float(np.mean(losses)),
                        "lambda": cfg.lam, "lr": lr, "step_losses": losses})
        log.debug("pretrain epoch %d loss %.4f", epoch, np.mean(losses))
    _write_log(log_path, records)

    full = head.export()
    classifiers = {}
    meta = {"phase": "pretrain", "epoch": cfg.epochs, "train_config": _cfg_dict(cfg), "log": records,
            "source_ids": list(src.identities)}
    if joint is not None:
        full = ClassifierWeights(full.matrix, full.identities, frozen=False)
        classifiers["joint"] = full
        classifiers["source"] = source_block(full, joint)
        meta["joint_map"] = joint.to_dict()
        meta["target_ids"] = list(_train_records(target).identities)
    else:
        classifiers["source"] = full
    return Checkpoint.from_model(model, classifiers, **meta)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_decay_epochs"] = list(cfg.lr_decay_epochs)
    return d


def _write_log(path, records):
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps({k: v for k, v in r.items() if k != "step_losses"}) + "\n")


def _target_classifier(cfg: TrainConfig, ckpt: Checkpoint, model, tgt: DatasetManifest, x_tgt) -> ClassifierWeights:
    ids = tgt.identities
    if cfg.classifier == "naive":
        return random_classifier(model.config.embed_dim, ids, cfg.seed + 1)
    if cfg.classifier == "mean":
        emb = embed(model, x_tgt, normalize=True)
        labels = np.asarray(tgt.labels())
        if not cfg.stratify_modality:
            return mean_classifier_init(emb, labels, len(ids), ids)
        # average the per-modality class means
        parts = []
        for mod in ("VIS", "NIR"):
            mask = np.array([r.modality == mod for r in tgt.records])
            if mask.any():
                parts.append(mean_classifier_init(emb[mask], labels[mask], len(ids), ids).matrix)
        return mean_classifier_init(np.concatenate([p.T for p in parts]),
                                    np.tile(np.arange(len(ids)), len(parts)), len(ids), ids)
    joint = JointLabelMap.from_dict(ckpt.metadata["joint_map"])
    sub = subspace_extract(ckpt.classifiers["joint"], joint)
    src_set = set(joint.source_ids)
    order = [sub.identities.index(rename_target_identity(t, src_set)) for t in ids]
    return ClassifierWeights(sub.matrix[:, order], ids, frozen=True)


def check_regime(cfg: TrainConfig, ckpt: Checkpoint, target: DatasetManifest, source: Optional[DatasetManifest]):
    problems = []
    if cfg.classifier == "subspace":
        if "joint" not in ckpt.classifiers or "joint_map" not in ckpt.metadata:
            problems.append("subspace classifier requires a checkpoint pre-trained with target identities")
        else:
            joint = JointLabelMap.from_dict(ckpt.metadata["joint_map"])
            src_set = set(joint.source_ids)
            try:
                tids = _train_records(target).identities
            except ValueError:
                tids = []
            missing = [t for t in tids if rename_target_identity(t, src_set) not in joint.target_ids]
            if missing:
                problems.append(f"target identities absent from the joint classifier: {missing[:5]}")
    if cfg.lam > 0:
        if source is None:
            problems.append("lambda > 0 requires a source manifest")
        if "source" not in ckpt.classifiers:
            problems.append("lambda > 0 requires a source classifier in the checkpoint")
    try:
        _train_records(target)
    except ValueError:
        problems.append("target manifest has no train split")
    if problems:
        raise RegimeError("; ".join(problems))


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    initial_target: ClassifierWeights


def finetune(cfg: TrainConfig, ckpt: Checkpoint, target: DatasetManifest,
             source: Optional[DatasetManifest] = None, log_path=None,
             return_init: bool = False):
    """Fine-tune ``ckpt`` on the target train split under the regime in ``cfg``.

    One step consumes one target batch and, when ``cfg.lam > 0``, one batch
    from an endless shuffled source stream. An epoch is one pass over the
    target train split.
    """
    check_regime(cfg, ckpt, target, source)
    tgt = _train_records(target)
    x_tgt = load_tensor(tgt, cfg.crop_size)
    y_tgt = np.asarray(tgt.labels())

    _seed_all(cfg.seed)
    model = ckpt.backbone()
    init = _target_classifier(cfg, ckpt, model, tgt, x_tgt)
    tgt_head = CosineHead(init)
    heads = [tgt_head]

    src_head = None
    if cfg.lam > 0:
        src = _train_records(source)
        x_src = load_tensor(src, cfg.crop_size)
        src_clf = ckpt.classifiers["source"]
        cmap = src_clf.identity_map
        try:
            y_src = np.asarray([cmap[r.identity] for r in src.records])
        except KeyError as exc:
            raise RegimeError(f"source identity {exc} not in the checkpoint's source classifier") from None
        src_head = CosineHead(ClassifierWeights(src_clf.matrix, src_clf.identities, frozen=True))
        src_stream = Stream(len(x_src), cfg.batch_source, np.random.default_rng([cfg.seed, 21]))
        src_aug_rng = np.random.default_rng([cfg.seed, 22])

    snapshot = None
    if cfg.regularizer == "rct":
        snapshot = {k: v.detach().clone() for k, v in model.named_parameters()}

    opt = _optimizer(_decay_groups(model, heads, cfg), cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    aug_rng = np.random.default_rng([cfg.seed, 12])
    aug = AugmentConfig(cfg.red_prob, cfg.hflip_prob, cfg.seed)
    mcfg = MarginConfig(cfg.margin, cfg.scale)
    records, step = [], 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        _apply_lr(opt, lr)
        perm = rng.permutation(len(x_tgt))
        lt_hist, ls_hist, step_losses = [], [], []
        for i in range(0, len(x_tgt), cfg.batch_target):
            idx = perm[i : i + cfg.batch_target]
            xb = augment_batch(x_tgt[idx], aug_rng, aug, red=cfg.red_aug)
            emb = F.normalize(model(torch.from_numpy(xb)), dim=1)
            l_t, _ = arcface_loss(emb, tgt_head.normalized(), torch.from_numpy(y_tgt[idx]), mcfg)
            l_s = None
            if src_head is not None:
                sidx = src_stream.next()
                sb = augment_batch(x_src[sidx], src_aug_rng, aug, red=cfg.red_aug or cfg.red_aug_source)
                semb = F.normalize(model(torch.from_numpy(sb)), dim=1)
                l_s, _ = arcface_loss(semb, src_head.normalized(), torch.from_numpy(y_src[sidx]), mcfg)
            rct = rct_penalty(dict(model.named_parameters()), snapshot) if snapshot is not None else None
            parts = joint_finetune_loss(l_t, l_s, cfg.lam, rct=rct, rct_weight=cfg.rct_weight)
            step += 1
            _step_loss_check(parts.total, epoch, step, "finetune")
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            lt_hist.append(parts.l_target)
            ls_hist.append(parts.l_source)
            step_losses.append(parts.l_total)
        records.append({"phase": "finetune", "epoch": epoch, "step": step,
                        "loss_target": float(np.mean(lt_hist)), "loss_source": float(np.mean(ls_hist)),
                        "lambda": cfg.lam, "lr": lr, "step_losses": step_losses})
    _write_log(log_path, records)

    classifiers = {"target": tgt_head.export() if not tgt_head.frozen else
                   ClassifierWeights(tgt_head.weight.numpy().copy(), tgt_head.identities, True)}
    if src_head is not None:
        classifiers["source"] = ClassifierWeights(src_head.weight.numpy().copy(), src_head.identities, True)
    elif "source" in ckpt.classifiers:
        classifiers["source"] = ckpt.classifiers["source"]
    meta = {k: v for k, v in ckpt.metadata.items() if k in ("joint_map", "source_ids")}
    meta.update({"phase": "finetune", "epoch": cfg.epochs, "train_config": _cfg_dict(cfg), "log": records,
                 "target_ids": list(tgt.identities)})
    out = Checkpoint.from_model(model, classifiers, **meta)
    if return_init:
        return FinetuneResult(out, init)
    return out
