"""Score a model with the delta-threshold protocol and dump PCA features.

Evaluation samples queries from the ground truth (strided: every 5 frames
along each track; first: the first visible frame), tracks them, and reports
the fraction of visible points within 1/2/4/8/16 px, their average, and a
second-difference jitter statistic. PCA dumps compress each frame's feature
grid to RGB for eyeballing temporal consistency.

Run:  python3 demos/04_evaluate_and_visualize.py
"""

import numpy as np

from tempotrack.backbone import BackboneConfig
from tempotrack.evaluation import evaluate, pca_dump
from tempotrack.synthdata import SceneSpec, generate_clip
from tempotrack.training import TrainConfig, train_stage_a
from tempotrack import tensor as tt

train_clips = [generate_clip(SceneSpec(seed=2 * s, frames=12, tracks_per_clip=24))
               for s in range(8)]
held_clips = [generate_clip(SceneSpec(seed=2 * s + 1, frames=12, tracks_per_clip=24))
              for s in range(4)]

model, _ = train_stage_a(
    train_clips, BackboneConfig(),
    TrainConfig(lr=3e-4, iters=150, warmup_iters=10, queries_per_batch=32, seed=0))

for mode in ("strided", "first"):
    report = evaluate(model, held_clips, mode)
    accs = " ".join(f"d{int(t)}={report.accuracies[t]:.2f}" for t in sorted(report.accuracies))
    print(f"{mode:8s} n_queries={report.n_queries:4d} {accs} "
          f"avg={report.avg_accuracy:.3f} jitter={report.mean_jitter:.2f}px")

# the harness checks itself: scoring the ground truth yields exactly 1.0
oracle = evaluate(None, held_clips, "strided", oracle=True)
print(f"oracle self-test: avg accuracy = {oracle.avg_accuracy}")

with tt.no_grad():
    feats = model.extract_features(held_clips[0].frames_float())
paths = pca_dump(feats.data, "demo_features")
print(f"wrote {len(paths)} PCA images to demo_features/ (view with any PPM viewer)")
