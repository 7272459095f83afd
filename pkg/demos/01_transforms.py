"""Affine and thin-plate-spline transforms on the normalized [-1, 1] domain.

Builds one transform of each kind from a raw parameter vector, composes them,
warps a line grid and checks that the deformation folds nowhere.

    python demos/01_transforms.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np

from histreg.geometry import (
    Image2D, ThetaVector, compose, deformed_grid_image, grid_pattern,
    transform_from_json, transform_from_theta, warp_image,
)
from histreg.io import save_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "transforms"
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(3)

# theta is scaled by alpha: A = I + alpha * theta, so small raw values stay near identity
affine = transform_from_theta(ThetaVector(np.array([0.5, 0.8, 0.4, -0.3, 0.1, 0.6]), "affine"))
print("affine matrix\n", affine.matrix, "\noffset", affine.offset)

# 36 x-displacements then 36 y-displacements of the 6x6 control lattice
tps = transform_from_theta(ThetaVector(rng.uniform(-0.6, 0.6, 72), "tps"))
both = compose(affine, tps)
probe = np.array([[0.0, 0.0], [0.5, -0.5]])
print("composite maps", probe.tolist(), "->", np.round(both(probe), 4).tolist())
assert np.allclose(both(probe), affine(tps(probe)))

report = deformed_grid_image(both, line_spacing_px=12)
print(f"minimum Jacobian determinant {report.min_jacobian_det:.3f} (positive means no folding)")
save_image(out / "grid_before.png", grid_pattern((240, 240), 12))
save_image(out / "grid_after.png", report.image.pixels)

# backward warping: warped(p) = moving(phi(p)), zero outside the moving image
checker = Image2D(np.kron((np.indices((8, 8)).sum(0) % 2).astype(float), np.ones((15, 15))))
save_image(out / "checker_warped.png", warp_image(checker, both, checker.shape).pixels)

text = both.to_json()
again = transform_from_json(text)
print("JSON round trip exact:", np.array_equal(again(probe), both(probe)))
print("wrote", out)
