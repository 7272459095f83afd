"""Train both network stages briefly, then register an unseen pair.

The affine stage sees binary masks and the TPS stage sees textured images.
Inference is two forward passes: affine on the masks, then TPS on the
affinely prewarped intensity image.  With the default few epochs the
networks are far from converged; pass a larger epoch count to see them
improve.

    python demos/03_train_and_register.py [OUT_DIR] [EPOCHS]
"""
import sys
import time
from pathlib import Path

import numpy as np
import torch

from histreg.fixtures import canvas_sources, random_composite
from histreg.geometry import compose, warp_image
from histreg.io import save_image
from histreg.metrics import dice
from histreg.pipeline import overlay_image, register_canvases
from histreg.synth import make_training_set
from histreg.training import TrainConfig, plot_loss_curves, train_stage

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "network"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 3
out.mkdir(parents=True, exist_ok=True)
torch.manual_seed(0)

masks, textures = canvas_sources(20, seed=0)
cfg = TrainConfig(epochs=epochs, batch_size=16)
models, reports = {}, []
for kind, sources in (("affine", masks), ("tps", textures)):
    t0 = time.time()
    data = make_training_set(sources, n_per_image=5, kind=kind, rng_seed=1)
    models[kind], report = train_stage(data, kind, cfg)
    reports.append(report)
    print(f"{kind}: {len(data)} pairs, val loss {report.initial_val_loss:.1f} -> {report.best_val_loss:.1f} "
          f"in {time.time() - t0:.0f} s")
plot_loss_curves(reports, out / "loss_curves.png")

# an unseen source moved by a random affine+TPS composite
(mask,), (tex,) = canvas_sources(1, seed=123)
truth = random_composite(np.random.default_rng(7))
fixed_mask = warp_image(mask, truth, mask.shape, order="nearest")
fixed = warp_image(tex, truth, tex.shape)

for m in models.values():
    m.forward_calls = 0
affine, tps, times = register_canvases(mask.pixels, tex.pixels, fixed_mask.pixels, fixed.pixels,
                                       models["affine"], models["tps"])
estimate = compose(affine, tps)
passes = sum(m.forward_calls for m in models.values())
warped_mask = warp_image(mask, estimate, mask.shape, order="nearest")
print(f"Dice before {dice(mask.pixels, fixed_mask.pixels):.3f}, after {dice(warped_mask.pixels, fixed_mask.pixels):.3f}")
print(f"{passes} forward passes, stage times {({k: round(v, 4) for k, v in times.items()})} s")
warped = warp_image(tex, estimate, tex.shape).pixels
save_image(out / "overlay.png", overlay_image(fixed.pixels, warped, {"mask": warped_mask.pixels}))
print("wrote", out)
