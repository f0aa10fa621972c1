"""Deterministic synthetic paired VIS/NIR dataset generator.

Each identity is a latent vector rendered through fixed per-channel smooth
pattern bases. VIS images keep three distinct channels; NIR images are a
red-dominant channel mix plus sensor noise, stored as replicated grayscale.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .datamodel import DatasetManifest, ImageRecord, save_manifest


@dataclass(frozen=True)
class SynthConfig:
    name: str = "synth"
    n_source_ids: int = 40
    n_target_ids: int = 10
    n_eval_ids: int = 30
    samples_per_id_per_modality: int = 6
    source_samples_per_id: int = 30
    source_eval_samples: int = 6
    image_size: int = 16
    latent_dim: int = 12
    identity_signal_strength: float = 1.0
    channel_signal: tuple = (1.0, 1.0, 1.0)
    shared_channel_fraction: float = 0.0
    jitter: float = 0.3
    noise_level: float = 0.03
    nuisance_strength: float = 0.5
    nuisance_dim: int = 4
    pattern_smoothness: float = 1.5
    nir_weights: tuple = (0.7, 0.2, 0.1)
    nir_noise: float = 0.03
    nir_gain: float = 1.0
    pattern_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        for k in ("n_source_ids", "n_target_ids", "n_eval_ids", "samples_per_id_per_modality",
                  "source_samples_per_id", "source_eval_samples", "image_size", "latent_dim"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.samples_per_id_per_modality < 2 or self.source_eval_samples < 2:
            raise ValueError("eval identities need >= 2 samples per modality (gallery + probe)")
        if self.noise_level < 0 or self.nir_noise < 0 or self.jitter < 0:
            raise ValueError("noise levels must be non-negative")
        if len(self.nir_weights) != 3 or len(self.channel_signal) != 3:
            raise ValueError("nir_weights and channel_signal need three entries")
        object.__setattr__(self, "nir_weights", tuple(float(w) for w in self.nir_weights))
        object.__setattr__(self, "channel_signal", tuple(float(w) for w in self.channel_signal))


class Renderer:
    """Fixed decoder mapping (identity latent, nuisance latent) to an RGB image."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng(cfg.pattern_seed)
        s, k = cfg.image_size, cfg.latent_dim

        def patterns(n):
            raw = rng.standard_normal((n, s, s))
            sm = np.stack([gaussian_filter(r, cfg.pattern_smoothness, mode="wrap") for r in raw])
            return sm / sm.reshape(n, -1).std(axis=1)[:, None, None]

        shared = patterns(k)
        own = patterns(3 * k).reshape(3, k, s, s)
        a = cfg.shared_channel_fraction
        self.identity_basis = np.sqrt(a) * shared[None] + np.sqrt(1 - a) * own  # (3, k, s, s)
        self.nuisance_basis = patterns(cfg.nuisance_dim)  # shared across channels
        self.cfg = cfg

    def render(self, z: np.ndarray, n: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        amp = cfg.identity_signal_strength * np.asarray(cfg.channel_signal)
        ident = np.einsum("k,ckxy->cxy", z, self.identity_basis) / np.sqrt(cfg.latent_dim)
        nuis = np.einsum("k,kxy->xy", n, self.nuisance_basis) / np.sqrt(max(cfg.nuisance_dim, 1))
        field_ = amp[:, None, None] * ident + cfg.nuisance_strength * nuis[None]
        return (0.5 + 0.25 * np.tanh(field_)).transpose(1, 2, 0)  # (s, s, 3) in (0.25, 0.75)


def _vis_sample(renderer: Renderer, z, rng, cfg: SynthConfig) -> np.ndarray:
    zs = z + cfg.jitter * rng.standard_normal(z.shape)
    nuis = rng.standard_normal(cfg.nuisance_dim)
    img = renderer.render(zs, nuis)
    return np.clip(img + cfg.noise_level * rng.standard_normal(img.shape), 0, 1)


def _nir_from_vis(vis: np.ndarray, rng, cfg: SynthConfig) -> np.ndarray:
    w = np.asarray(cfg.nir_weights)
    gray = 0.5 + cfg.nir_gain * ((vis @ w) / w.sum() - 0.5)
    gray = np.clip(gray + cfg.nir_noise * rng.standard_normal(gray.shape), 0, 1)
    return np.repeat(gray[..., None], 3, axis=2)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _write_png(path: Path, img: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)


def _identity_rngs(seed: int, tag: int, n: int):
    root = np.random.SeedSequence([seed, tag])
    return [np.random.default_rng(s) for s in root.spawn(n)]


def render_identity(renderer: Renderer, rng, n_vis: int, n_nir: int, cfg: SynthConfig):
    """Latent + ``n_vis`` VIS images + ``n_nir`` NIR images for one identity."""
    z = rng.standard_normal(cfg.latent_dim)
    vis = [_vis_sample(renderer, z, rng, cfg) for _ in range(n_vis)]
    nir = [_nir_from_vis(_vis_sample(renderer, z, rng, cfg), rng, cfg) for _ in range(n_nir)]
    return z, vis, nir


def generate(cfg: SynthConfig, out_dir):
    """Write PNGs and ``source.csv`` / ``target.csv`` under ``out_dir``.

    Returns ``(source, target)`` manifests. Source holds VIS-only training
    identities plus disjoint VIS-only eval identities (gallery/probe splits);
    target holds paired VIS+NIR training identities plus disjoint eval
    identities whose VIS images are split into gallery/probe and whose NIR
    images are probes.
    """
    out = Path(out_dir)
    renderer = Renderer(cfg)
    src_recs, tgt_recs = [], []
    n = cfg.samples_per_id_per_modality

    for i, rng in enumerate(_identity_rngs(cfg.seed, 0, cfg.n_source_ids + cfg.n_eval_ids)):
        ident = f"s{i:04d}"
        train = i < cfg.n_source_ids
        k = cfg.source_samples_per_id if train else cfg.source_eval_samples
        _, vis, _ = render_identity(renderer, rng, k, 0, cfg)
        for j, img in enumerate(vis):
            split = "train" if train else ("gallery" if j < k // 2 else "probe")
            p = out / "source" / ident / f"vis_{j:03d}.png"
            _write_png(p, img)
            src_recs.append(ImageRecord(str(p), ident, "VIS", split))

    for i, rng in enumerate(_identity_rngs(cfg.seed, 1, cfg.n_target_ids + cfg.n_eval_ids)):
        ident = f"t{i:04d}"
        train = i < cfg.n_target_ids
        _, vis, nir = render_identity(renderer, rng, n, n, cfg)
        for j, img in enumerate(vis):
            split = "train" if train else ("gallery" if j < n // 2 else "probe")
            p = out / "target" / ident / f"vis_{j:03d}.png"
            _write_png(p, img)
            tgt_recs.append(ImageRecord(str(p), ident, "VIS", split))
        for j, img in enumerate(nir):
            p = out / "target" / ident / f"nir_{j:03d}.png"
            _write_png(p, img)
            tgt_recs.append(ImageRecord(str(p), ident, "NIR", "train" if train else "probe"))

    source = DatasetManifest(f"{cfg.name}-source", tuple(src_recs))
    target = DatasetManifest(f"{cfg.name}-target", tuple(tgt_recs))
    save_manifest(source, out / "source.csv")
    save_manifest(target, out / "target.csv")
    return source, target


def config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["nir_weights"] = list(cfg.nir_weights)
    d["channel_signal"] = list(cfg.channel_signal)
    return d
