"""Dataset manifests, identity label spaces and the joint source+target label map."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

MODALITIES = ("VIS", "NIR")
SPLITS = ("train", "gallery", "probe")
HEADER = ["path", "identity", "modality", "split"] + [
    f"l{axis}{i}" for i in range(1, 6) for axis in "xy"
]
COLLISION_SUFFIX = "#tgt"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: str
    identity: str
    modality: str
    split: str
    landmarks: Optional[tuple] = None  # ((x1, y1), ..., (x5, y5))

    def __post_init__(self):
        if not self.identity:
            raise ManifestError("identity must be non-empty")
        if self.modality not in MODALITIES:
            raise ManifestError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.landmarks is not None:
            pts = tuple(tuple(float(v) for v in p) for p in self.landmarks)
            if len(pts) != 5 or any(len(p) != 2 for p in pts):
                raise ManifestError("landmarks must be exactly 5 (x, y) points")
            if not all(math.isfinite(v) for p in pts for v in p):
                raise ManifestError("landmarks must be finite")
            object.__setattr__(self, "landmarks", pts)


def _first_appearance_index(records: Iterable[ImageRecord]) -> dict:
    index: dict = {}
    for r in records:
        if r.identity not in index:
            index[r.identity] = len(index)
    return index


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered collection of image records with a contiguous identity index.

    ``identity_index`` maps each identity to a label in ``0..C-1`` assigned in
    first-appearance order.
    """

    name: str
    records: tuple
    identity_index: dict = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.identity_index is None:
            object.__setattr__(self, "identity_index", _first_appearance_index(self.records))
        idx = self.identity_index
        if sorted(idx.values()) != list(range(len(idx))):
            raise ManifestError("identity_index must be a bijection onto 0..C-1")
        missing = {r.identity for r in self.records} - set(idx)
        if missing:
            raise ManifestError(f"identities missing from identity_index: {sorted(missing)}")

    def __len__(self):
        return len(self.records)

    def __hash__(self):
        return hash((self.name, self.records))

    @property
    def n_classes(self) -> int:
        return len(self.identity_index)

    @property
    def identities(self) -> list:
        """Identities ordered by label."""
        return sorted(self.identity_index, key=self.identity_index.__getitem__)

    def labels(self) -> list:
        return [self.identity_index[r.identity] for r in self.records]


@dataclass(frozen=True)
class JointLabelMap:
    """Label space covering source identities followed by a contiguous target block."""

    source_ids: tuple
    target_ids: tuple
    joint_index: dict = field(compare=False, hash=False)

    @property
    def n_source(self) -> int:
        return len(self.source_ids)

    @property
    def n_target(self) -> int:
        return len(self.target_ids)

    def __len__(self):
        return len(self.joint_index)

    def target_columns(self) -> list:
        return [self.joint_index[t] for t in self.target_ids]

    def to_dict(self) -> dict:
        return {"source_ids": list(self.source_ids), "target_ids": list(self.target_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "JointLabelMap":
        return _build_joint(list(d["source_ids"]), list(d["target_ids"]))


def _build_joint(source_ids: Sequence[str], target_ids: Sequence[str]) -> JointLabelMap:
    joint = {s: i for i, s in enumerate(source_ids)}
    for k, t in enumerate(target_ids):
        joint[t] = len(source_ids) + k
    if len(joint) != len(source_ids) + len(target_ids):
        raise ManifestError("source and target identity lists overlap")
    return JointLabelMap(tuple(source_ids), tuple(target_ids), joint)


def rename_target_identity(identity: str, source_ids) -> str:
    """Name a target identity takes in the joint space (suffixed on collision)."""
    name = identity
    while name in source_ids:
        name = name + COLLISION_SUFFIX
    return name


def merge_identity_spaces(source: DatasetManifest, target: DatasetManifest) -> JointLabelMap:
    """Joint label map: source labels first, then target labels as one block.

    Target identities whose names collide with a source identity get a
    ``#tgt`` suffix.
    """
    source_ids = source.identities
    src_set = set(source_ids)
    target_ids = [rename_target_identity(t, src_set) for t in target.identities]
    return _build_joint(source_ids, target_ids)


def subset(
    manifest: DatasetManifest,
    modality: Optional[str] = None,
    split: Optional[str] = None,
    predicate: Optional[Callable[[ImageRecord], bool]] = None,
    name: Optional[str] = None,
) -> DatasetManifest:
    """Filter records by modality and/or split; the identity index is rebuilt.

    Raises ``ManifestError`` when nothing matches.
    """
    if modality is not None and modality not in MODALITIES:
        raise ManifestError(f"unknown modality {modality!r}")
    if split is not None and split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    recs = [
        r
        for r in manifest.records
        if (modality is None or r.modality == modality)
        and (split is None or r.split == split)
        and (predicate is None or predicate(r))
    ]
    if not recs:
        raise ManifestError(
            f"subset of {manifest.name!r} (modality={modality}, split={split}) is empty"
        )
    return DatasetManifest(name or manifest.name, tuple(recs))


def _parse_row(row: list, lineno: int, base: Path) -> ImageRecord:
    if len(row) != len(HEADER):
        raise ManifestError(f"row {lineno}: expected {len(HEADER)} columns, got {len(row)}")
    path, identity, modality, split = (c.strip() for c in row[:4])
    cells = [c.strip() for c in row[4:]]
    landmarks = None
    if any(cells):
        if not all(cells):
            raise ManifestError(f"row {lineno}: landmark cells must be all empty or all present")
        try:
            vals = [float(c) for c in cells]
        except ValueError as exc:
            raise ManifestError(f"row {lineno}: bad landmark value ({exc})") from None
        if not all(math.isfinite(v) for v in vals):
            raise ManifestError(f"row {lineno}: non-finite landmark")
        landmarks = tuple(zip(vals[0::2], vals[1::2]))
    if path and not Path(path).is_absolute():
        path = str(base / path)
    try:
        return ImageRecord(path, identity, modality, split, landmarks)
    except ManifestError as exc:
        raise ManifestError(f"row {lineno}: {exc}") from None


def load_manifest(path, name: Optional[str] = None) -> DatasetManifest:
    """Read a manifest CSV. Relative image paths resolve against the CSV's directory."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    if [c.strip() for c in rows[0]] != HEADER:
        raise ManifestError(f"{path}: row 1: bad header")
    records = [_parse_row(row, i, path.parent) for i, row in enumerate(rows[1:], start=2) if row]
    if not records:
        raise ManifestError(f"{path}: manifest has no records")
    return DatasetManifest(name or path.stem, tuple(records))


def save_manifest(manifest: DatasetManifest, path, relative_to=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in manifest.records:
            p = Path(r.path)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            lm = [repr(v) for pt in r.landmarks for v in pt] if r.landmarks else [""] * 10
            w.writerow([p.as_posix(), r.identity, r.modality, r.split] + lm)
    return path
