"""
Fine-tuning on a handful of NIR-VIS identities
==============================================

Naive fine-tuning (fresh classifier, everything trainable) fits the target
identities but erodes the source embedding. A frozen mean-embedding
classifier plus a source term (lambda = 1) keeps the source verification
rate while still improving NIR-VIS matching.
"""

import tempfile

from nirvis import config as C
from nirvis.datamodel import subset
from nirvis.evaluate import evaluate_checkpoint, protocol_sets
from nirvis.synthgen import SynthConfig, generate
from nirvis.trainer import finetune, pretrain

cfg = C.resolve()
source, target = generate(SynthConfig(**C.synth_kwargs(cfg, "synth", seed=0)), tempfile.mkdtemp())
pre = pretrain(C.pretrain_config(cfg, 0), source, backbone_cfg=C.backbone_config(cfg))

nir_vis = protocol_sets(target)
vis_vis = (subset(source, split="gallery"), subset(source, split="probe"))


def show(name, ckpt):
    t = evaluate_checkpoint(ckpt, *nir_vis, fars=(1e-2,)).tar_at[0.01]
    s = evaluate_checkpoint(ckpt, *vis_vis, fars=(1e-2,)).tar_at[0.01]
    print(f"{name:<22} target NIR-VIS {t:.3f}   source VIS-VIS {s:.3f}")


show("pre-trained", pre)
for name, kw in [("naive", dict(classifier="naive", lam=0.0)),
                 ("mean, lambda=0", dict(classifier="mean", lam=0.0)),
                 ("mean, lambda=1", dict(classifier="mean", lam=1.0))]:
    show(name, finetune(C.finetune_config(cfg, 0, **kw), pre, target, source))
