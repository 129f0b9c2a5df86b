"""
Degrading a synthetic image
===========================

Sample a few random transformations and look at what they do to one image.
"""
import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from aeris.datagen import render_shapes_image
from aeris.degradation import DegradationConfig, DegradationParams, apply_degradation, sample_degradation, substream

img, boxes = render_shapes_image(np.random.default_rng(3), (128, 128))
print(len(boxes), "objects")

cfg = DegradationConfig(seed=5)
fig, axes = plt.subplots(1, 5, figsize=(15, 3))
axes[0].imshow(img)
axes[0].set_title("clean")
for i, ax in enumerate(axes[1:]):
    rng = substream(cfg.seed, i)
    p = sample_degradation(cfg, rng)
    out = apply_degradation(img, p, rng)
    ax.imshow(out, interpolation="nearest")
    ax.set_title(f"{p.kernel.kind} s={p.scale:.2f}\nsigma={p.sigma * 255:.1f}/255 {p.method}", fontsize=8)
for ax in axes:
    ax.axis("off")
fig.savefig("degradation.png", dpi=100, bbox_inches="tight")
print("wrote degradation.png")

# the output side is floor(128 / s)
for s in (1.0, 1.5, 2.5, 4.0):
    print(s, apply_degradation(img, DegradationParams(scale=s), None).shape)
