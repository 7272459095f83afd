"""Synthetic training pairs: random transforms applied to one source image.

Each tuple holds a moving image, the fixed image obtained by warping it with a
sampled transform, and the ground-truth parameters.  The training loss is zero
at the ground truth and grows away from it.

    python demos/02_synthetic_pairs.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np

from histreg.fixtures import canvas_sources
from histreg.io import save_image
from histreg.synth import TransformBounds, decompose_affine, make_training_set
from histreg.geometry import ThetaVector, affine_from_theta
from histreg.training import ssd_loss

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "synth"
out.mkdir(parents=True, exist_ok=True)

masks, textures = canvas_sources(4, seed=0)
bounds = TransformBounds()
print("sampling bounds:", bounds)

affine_set = make_training_set(masks, n_per_image=3, kind="affine", rng_seed=1)
tps_set = make_training_set(textures, n_per_image=3, kind="tps", rng_seed=1)
print(len(affine_set), "affine tuples,", len(tps_set), "TPS tuples")

for t in affine_set[:3]:
    a = affine_from_theta(t.theta_gt)
    f = decompose_affine(a.matrix, a.offset)
    print(f"  source {t.source} seed {t.seed}: rotation {f.rotation_deg:+.1f} deg, "
          f"scale ({f.scale_x:.2f}, {f.scale_y:.2f})")

t = tps_set[0]
print("loss at ground truth   ", round(ssd_loss(t.moving, t.fixed, t.theta_gt), 6))
print("loss at identity       ", round(ssd_loss(t.moving, t.fixed, ThetaVector.zeros("tps")), 3))

row = lambda tuples: np.hstack([np.hstack([u.moving.pixels, u.fixed.pixels]) for u in tuples[:3]])
save_image(out / "pairs.png", np.vstack([row(affine_set), row(tps_set)]))
print("wrote", out / "pairs.png", "(moving | fixed, three pairs per row)")
