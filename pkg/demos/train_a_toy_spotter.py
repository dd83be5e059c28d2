"""Pretrain, train and evaluate the toy scene-text spotter on synthetic frames.

Takes a couple of minutes on one CPU core.

    python3 demos/train_a_toy_spotter.py [steps]
"""

import sys
import time

import numpy as np

from textvpr import evalkit as E
from textvpr import spotter as S
from textvpr import training as TR
from textvpr.synthgen import TraversalConfig, generate_traversal

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500

# %% Sixteen places, two signs each. The map pass is our training set.
pair = generate_traversal(TraversalConfig(n_places=16), seed=0)
frames = pair.map_frames
model = S.SpotterModel.init(seed=0)
print(f"{sum(p.data.size for p in model.parameters()):,} parameters, "
      f"{model.config.n_patches} patches of {model.config.patch_size}px")

# %% Masked-autoencoder warm-up: hide 75% of the patches and reconstruct them.
images = np.stack([f.image for f in pair.map_frames + pair.query_frames])
before = TR.mae_eval_loss(model, images)
TR.pretrain_mae(model, images, steps=200)
print(f"masked-patch MSE {before:.4f} -> {TR.mae_eval_loss(model, images):.4f} after 200 steps")

# %% Set-prediction training. Every 100 steps, spot the training frames and score them.
truths = [f.instances for f in frames]
t0 = time.perf_counter()


def progress(step, m, trace):
    if (step + 1) % 100 == 0:
        preds = [S.spot(f.image, m) for f in frames]
        det, e2e = E.eval_detection(preds, truths), E.eval_end2end(preds, truths)
        print(f"step {step + 1:5d}  loss {trace[-1][1]:.4f}  H {det.hmean:.3f}  F {e2e.hmean:.3f}"
              f"  ({time.perf_counter() - t0:.0f} s)")


TR.fit(model, frames, TR.TrainConfig(steps=steps, batch_size=16), progress)

# %% What does the model read in a query frame it never saw?
q = pair.query_frames[0]
print("\nquery frame truth:", sorted(w.text for w in q.instances))
for inst in S.spot(q.image, model):
    print(f"  read {inst.text!r:12} confidence {inst.confidence:.2f}")

fps = E.measure_fps(lambda f: S.spot(f.image, model), pair.query_frames)
print(f"\ninference speed {fps.fps:.1f} frames/s (median of {len(fps.trials)} passes)")
