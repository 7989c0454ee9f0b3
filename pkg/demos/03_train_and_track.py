"""Train the two stages at toy scale, then track points through a clip.

Stage A pretrains the per-frame backbone on 2-frame sub-clips: it learns
spatially discriminative features but never sees more than adjacent-frame
context. Stage B freezes it and trains temporal adapters on whole clips.
Budgets here are tiny so the demo finishes in about a minute; see the
README for the full desk-scale recipe.

Run:  python3 demos/03_train_and_track.py
"""

import numpy as np

from tempotrack.adapter import AdapterConfig
from tempotrack.backbone import BackboneConfig
from tempotrack.synthdata import SceneSpec, generate_clip
from tempotrack.tracker import QueryPoint
from tempotrack.training import TrainConfig, train_stage_a, train_stage_b

clips = [generate_clip(SceneSpec(seed=2 * s, frames=12, tracks_per_clip=24))
         for s in range(8)]

print("stage A: pretraining the backbone on 2-frame windows ...")
model, log = train_stage_a(
    clips, BackboneConfig(),
    TrainConfig(lr=3e-4, iters=150, warmup_iters=10, queries_per_batch=32, seed=0))
print(f"  loss {log[0][2]:.2f} -> {log[-1][2]:.2f}")

print("stage B: freezing the backbone, training temporal adapters ...")
adapted, log_b = train_stage_b(
    model, clips, AdapterConfig(window=7),
    TrainConfig(lr=1e-3, iters=80, warmup_iters=10, queries_per_batch=32, seed=1))
print(f"  loss {log_b[0][2]:.2f} -> {log_b[-1][2]:.2f}")
print(f"  backbone frozen: {adapted.backbone.frozen}, adapters at slots {adapted.adapters.slots}")

# track a few ground-truth points through an unseen clip
clip = generate_clip(SceneSpec(seed=999, frames=12, tracks_per_clip=24))
queries = [QueryPoint(x=float(tr.positions[0, 0]), y=float(tr.positions[0, 1]), t=0)
           for tr in clip.tracks[:4]]
preds = adapted.track(clip.frames_float(), queries)
for pred, tr in zip(preds, clip.tracks[:4]):
    err = np.linalg.norm(pred.positions - tr.positions, axis=1)[tr.visible].mean()
    print(f"  track from ({pred.query.x:5.1f},{pred.query.y:5.1f}): "
          f"mean error over visible frames {err:.2f} px")
