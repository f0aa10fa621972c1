"""Backbone contract, the default small convolutional backbone, embedding and checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .heads import ClassifierWeights


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 64
    width: int = 16
    depth: int = 3
    input_size: int = 112
    groups: int = 4

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.width < 1 or self.depth < 1 or self.input_size < 2**self.depth:
            raise ValueError(f"invalid backbone dimensions: {self}")


class ConvBackbone(nn.Module):
    """``depth`` stride-2 conv blocks -> flatten -> linear to ``embed_dim``.

    GroupNorm keeps every sample independent of the rest of its batch, so
    training and inference forward passes agree.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        layers = []
        c_in = 3
        for i in range(config.depth):
            c_out = config.width * 2**i
            g = min(config.groups, c_out)
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=1, padding=1),
                nn.GroupNorm(g, c_out),
                nn.ReLU(inplace=True),
                nn.Conv2d(c_out, c_out, 3, stride=2, padding=1),
                nn.GroupNorm(g, c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        side = config.input_size
        for _ in range(config.depth):
            side = (side + 1) // 2
        self.fc = nn.Linear(c_in * side * side, config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.fc(h.flatten(1))


def build_backbone(config: BackboneConfig, seed: int = 0) -> ConvBackbone:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ConvBackbone(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class EmbeddingMatrix:
    """Row-aligned embeddings, identities and modalities."""

    vectors: np.ndarray
    identities: list
    modalities: list

    def __len__(self):
        return len(self.vectors)


def embed(backbone: nn.Module, batch, normalize: bool = True, chunk: int = 256) -> np.ndarray:
    """Inference-mode embeddings for a (B, 3, H, W) batch, one row per input."""
    was_training = backbone.training
    backbone.eval()
    x = torch.as_tensor(np.asarray(batch), dtype=next(backbone.parameters()).dtype)
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            outs.append(backbone(x[i : i + chunk]))
    backbone.train(was_training)
    out = torch.cat(outs).numpy() if outs else np.zeros((0, backbone.config.embed_dim), np.float32)
    if normalize:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm embedding cannot be normalized")
        out = out / norms
    return out


def embed_manifest(backbone: nn.Module, manifest, crop_size: int, normalize: bool = True) -> EmbeddingMatrix:
    from .preprocess import load_tensor

    vecs = embed(backbone, load_tensor(manifest, crop_size), normalize=normalize)
    return EmbeddingMatrix(
        vecs,
        [r.identity for r in manifest.records],
        [r.modality for r in manifest.records],
    )


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"NVW1"


def write_tensor_blob(path, tensors: "OrderedDict[str, np.ndarray]") -> str:
    """Flat little-endian blob: magic, header length, JSON header, raw arrays. Returns sha256."""
    header, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        header.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = _MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    _atomic_write(Path(path), payload)
    return hashlib.sha256(payload).hexdigest()


def read_tensor_blob(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path.name}: {exc}") from None
    if payload[:4] != _MAGIC:
        raise CheckpointError(f"{path.name}: not a tensor blob")
    try:
        (hlen,) = struct.unpack("<Q", payload[4:12])
        header = json.loads(payload[12 : 12 + hlen])
        base = 12 + hlen
        out = OrderedDict()
        for h in header:
            dt = np.dtype(h["dtype"])
            n = int(np.prod(h["shape"], dtype=np.int64)) * dt.itemsize
            start = base + h["offset"]
            if start + n > len(payload):
                raise ValueError("truncated")
            out[h["name"]] = np.frombuffer(payload[start : start + n], dtype=dt).reshape(h["shape"]).copy()
    except (ValueError, KeyError, struct.error) as exc:
        raise CheckpointError(f"{path.name}: corrupt ({exc})") from None
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    backbone_config: BackboneConfig
    state: "OrderedDict[str, torch.Tensor]"
    classifiers: dict = field(default_factory=dict)  # role -> ClassifierWeights
    metadata: dict = field(default_factory=dict)

    ROLES = ("source", "target", "joint")

    def __post_init__(self):
        for role, clf in self.classifiers.items():
            if role not in self.ROLES:
                raise CheckpointError(f"unknown classifier role {role!r}")
            if clf.matrix.shape[0] != self.backbone_config.embed_dim:
                raise CheckpointError(
                    f"classifier {role!r} has dim {clf.matrix.shape[0]}, "
                    f"backbone embed_dim is {self.backbone_config.embed_dim}"
                )

    @property
    def phase(self) -> Optional[str]:
        return self.metadata.get("phase")

    def backbone(self) -> ConvBackbone:
        model = ConvBackbone(self.backbone_config)
        model.load_state_dict(self.state)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: ConvBackbone, classifiers=None, **metadata) -> "Checkpoint":
        state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
        return cls(model.config, state, dict(classifiers or {}), metadata)


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Write ``weights.bin``, ``classifiers.bin`` (if any) and ``meta.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    weights = OrderedDict((k, v.detach().cpu().numpy()) for k, v in ckpt.state.items())
    meta = dict(ckpt.metadata)
    meta["backbone"] = asdict(ckpt.backbone_config)
    meta["weights_sha256"] = write_tensor_blob(d / "weights.bin", weights)
    if ckpt.classifiers:
        blocks = OrderedDict((role, c.matrix) for role, c in sorted(ckpt.classifiers.items()))
        meta["classifiers_sha256"] = write_tensor_blob(d / "classifiers.bin", blocks)
        meta["classifiers"] = {
            role: {"identities": c.identities, "frozen": c.frozen}
            for role, c in sorted(ckpt.classifiers.items())
        }
    elif (d / "classifiers.bin").exists():
        (d / "classifiers.bin").unlink()
    _atomic_write(d / "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
    return d


def load_checkpoint(directory, expected: Optional[BackboneConfig] = None) -> Checkpoint:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"meta.json missing in {d}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"meta.json corrupt: {exc}") from None
    cfg = BackboneConfig(**meta.pop("backbone"))
    if expected is not None and expected.embed_dim != cfg.embed_dim:
        raise CheckpointError(
            f"embed_dim mismatch: checkpoint has {cfg.embed_dim}, config expects {expected.embed_dim}"
        )
    if not (d / "weights.bin").exists():
        raise CheckpointError(f"weights.bin missing in {d}")
    if file_sha256(d / "weights.bin") != meta.pop("weights_sha256", None):
        raise CheckpointError("weights.bin checksum mismatch")
    state = OrderedDict((k, torch.from_numpy(v)) for k, v in read_tensor_blob(d / "weights.bin").items())
    classifiers = {}
    info = meta.pop("classifiers", None)
    digest = meta.pop("classifiers_sha256", None)
    if info:
        if not (d / "classifiers.bin").exists():
            raise CheckpointError(f"classifiers.bin missing in {d}")
        if file_sha256(d / "classifiers.bin") != digest:
            raise CheckpointError("classifiers.bin checksum mismatch")
        blocks = read_tensor_blob(d / "classifiers.bin")
        for role, entry in info.items():
            classifiers[role] = ClassifierWeights(blocks[role], list(entry["identities"]), entry["frozen"])
    return Checkpoint(cfg, state, classifiers, meta)
