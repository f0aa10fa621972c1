"""Five-landmark similarity alignment, bilinear warping and input normalization."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from PIL import Image

from .datamodel import DatasetManifest, ImageRecord

# ArcFace-convention template for a 112x112 crop: eyes, nose tip, mouth corners.
DEFAULT_TEMPLATE_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ]
)
DEFAULT_CROP_SIZE = 112


class AlignmentError(ValueError):
    pass


def default_template(size: int = DEFAULT_CROP_SIZE) -> np.ndarray:
    return DEFAULT_TEMPLATE_112 * (size / 112.0)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation`` on (x, y) pixel coordinates."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        if self.scale <= 0:
            raise AlignmentError("scale must be positive")
        if not np.allclose(rot.T @ rot, np.eye(2), atol=1e-9) or np.linalg.det(rot) <= 0:
            raise AlignmentError("rotation must be a proper 2x2 rotation")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, scale: float, angle: float, translation) -> "SimilarityTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(scale, np.array([[c, -s], [s, c]]), translation)

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    @property
    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        m = np.eye(3)
        m[:2, :2] = self.scale * self.rotation
        m[:2, 2] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.scale * pts @ self.rotation.T + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)


def estimate_similarity_transform(landmarks, template) -> SimilarityTransform:
    """Least-squares similarity mapping ``landmarks`` onto ``template`` (Umeyama)."""
    src = np.asarray(landmarks, dtype=float)
    dst = np.asarray(template, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AlignmentError(f"expected matching (N, 2) point sets, got {src.shape} and {dst.shape}")
    src_mean, dst_mean = src.mean(0), dst.mean(0)
    sc, dc = src - src_mean, dst - dst_mean
    src_var = (sc**2).sum() / len(src)
    if src_var < 1e-12 or (dc**2).sum() < 1e-12:
        raise AlignmentError("degenerate landmarks: points are coincident")

    cov = dc.T @ sc / len(src)
    u, sig, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((sig * d).sum() / src_var)
    trans = dst_mean - scale * rot @ src_mean
    return SimilarityTransform(scale, rot, trans)


def alignment_residual(transform: SimilarityTransform, landmarks, template) -> float:
    return float(((transform.apply(landmarks) - np.asarray(template, float)) ** 2).sum())


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W, C) at float coordinates; outside the image reads as zero."""
    h, w = image.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    padded = np.zeros((h + 2, w + 2) + image.shape[2:], dtype=np.float64)
    padded[1:-1, 1:-1] = image

    def tap(yy, xx):
        inside = (yy >= -1) & (yy <= h) & (xx >= -1) & (xx <= w)
        yy = np.clip(yy, -1, h) + 1
        xx = np.clip(xx, -1, w) + 1
        return padded[yy, xx] * inside[..., None]

    return (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x0 + 1) * fx * (1 - fy)
        + tap(y0 + 1, x0) * (1 - fx) * fy
        + tap(y0 + 1, x0 + 1) * fx * fy
    )


@dataclass
class AlignedImage:
    pixels: np.ndarray  # (size, size, 3), RGB in [0, 1]
    source_record: Optional[ImageRecord] = None


def warp_to_template(image: np.ndarray, transform: SimilarityTransform, size: int,
                     record: Optional[ImageRecord] = None) -> AlignedImage:
    """Resample ``image`` so that output pixel ``p`` reads source ``transform⁻¹(p)``.

    ``transform`` maps source coordinates to output coordinates, i.e. the
    transform returned by :func:`estimate_similarity_transform`.
    """
    img = np.asarray(image)
    img = img / 255.0 if np.issubdtype(img.dtype, np.integer) else img.astype(np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    inv = transform.inverse()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    src = inv.apply(np.stack([xx.ravel(), yy.ravel()], axis=1))
    out = bilinear_sample(img, src[:, 0].reshape(size, size), src[:, 1].reshape(size, size))
    return AlignedImage(np.clip(out, 0.0, 1.0), record)


def center_transform(height: int, width: int, size: int) -> SimilarityTransform:
    """Center-crop the largest square and rescale it to ``size``."""
    side = min(height, width)
    s = size / side
    off = np.array([(width - side) / 2.0, (height - side) / 2.0])
    # pixel-center convention so that an exact size match is the identity
    t = (0.5 * s - 0.5) - s * off
    return SimilarityTransform(s, np.eye(2), t * np.ones(2))


def normalize_pixels(image) -> np.ndarray:
    """(H, W, 3) in [0, 1] -> (3, H, W) in [-1, 1]."""
    px = image.pixels if isinstance(image, AlignedImage) else np.asarray(image, dtype=np.float64)
    return np.ascontiguousarray(((px - 0.5) / 0.5).transpose(2, 0, 1))


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def align_record(record: ImageRecord, size: int = DEFAULT_CROP_SIZE,
                 template: Optional[np.ndarray] = None) -> AlignedImage:
    """Align a record via its landmarks, or center-crop/resize when it has none."""
    img = read_image(record.path)
    if record.landmarks is None:
        h, w = img.shape[:2]
        if h == size and w == size:
            return AlignedImage(img, record)
        return warp_to_template(img, center_transform(h, w, size), size, record)
    tmpl = default_template(size) if template is None else np.asarray(template, float)
    tf = estimate_similarity_transform(record.landmarks, tmpl)
    return warp_to_template(img, tf, size, record)


@lru_cache(maxsize=32)
def _load_cached(manifest: DatasetManifest, size: int) -> np.ndarray:
    return np.stack([normalize_pixels(align_record(r, size)) for r in manifest.records]).astype(np.float32)


def load_tensor(manifest: DatasetManifest, size: int = DEFAULT_CROP_SIZE) -> np.ndarray:
    """All records of ``manifest`` as an (N, 3, size, size) float32 array in [-1, 1]."""
    return _load_cached(manifest, size)
