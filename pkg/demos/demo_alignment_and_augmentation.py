"""
Aligning landmarks and replicating the red channel
==================================================

A five-point similarity fit takes raw landmarks onto the crop template, and
the red-channel augmentation turns a colour image into a pseudo-NIR one.
"""

import numpy as np

from nirvis.augment import AugmentConfig, red_channel_augment
from nirvis.preprocess import (
    SimilarityTransform,
    alignment_residual,
    default_template,
    estimate_similarity_transform,
    normalize_pixels,
    warp_to_template,
)

# landmarks from a face that sits rotated, scaled and shifted in a 160 px photo
template = default_template(112)
pose = SimilarityTransform.from_params(1.4, np.deg2rad(-12), [20.0, 5.0])
landmarks = pose.apply(template)

tf = estimate_similarity_transform(landmarks, template)
print(f"scale {tf.scale:.4f}  angle {np.rad2deg(tf.angle):.2f} deg  "
      f"residual {alignment_residual(tf, landmarks, template):.2e}")

# the fit undoes the pose, so warping a smooth photo lands the face on the template
yy, xx = np.mgrid[0:160, 0:160]
photo = np.stack([xx / 160, yy / 160, 0.5 * np.ones_like(xx)], axis=2)
crop = warp_to_template(photo, tf, 112).pixels
print("aligned crop", crop.shape, "range", crop.min().round(3), crop.max().round(3))

# red-channel replication: (R, G, B) -> (R, R, R) with probability 0.5
x = normalize_pixels(crop)
cfg = AugmentConfig(red_replicate_prob=0.5)
kept = red_channel_augment(x, 0.9, cfg)
nir_like = red_channel_augment(x, 0.1, cfg)
print("draw 0.9 leaves the image alone:", np.array_equal(kept, x))
print("draw 0.1 copies red into every channel:", np.array_equal(nir_like[1], x[0]))
