"""The two numerical cores: reverse-mode autodiff and soft-argmax matching.

Everything in the pipeline differentiates through a small tape-based tensor
library; the tracking head is pure arithmetic (cosine correlation plus a
masked, temperature-scaled soft-argmax), so gradients reach the features.

Run:  python3 demos/02_autodiff_and_matching.py
"""

import numpy as np

from tempotrack import tensor as tt
from tempotrack.tensor import Tensor
from tempotrack.tracker import MatcherConfig, QueryPoint, soft_argmax, track_batch

# --- autodiff in one bite ---------------------------------------------------
x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
loss = tt.scale(tt.tsum(tt.mul(x, x)), 0.5)  # 0.5 * sum(x^2)
loss.backward()
print("grad of 0.5*sum(x^2) is x itself:", x.grad)

# every primitive is validated against central finite differences
w = Tensor(np.random.default_rng(0).standard_normal((3, 3, 2, 4)), requires_grad=True)
inp = Tensor(np.random.default_rng(1).standard_normal((6, 6, 2)))
err = tt.grad_check(lambda p: tt.tsum(tt.mul(tt.conv2d(inp, p, stride=2, padding=1),
                                             tt.conv2d(inp, p, stride=2, padding=1))), w)
print(f"conv2d weight-gradient vs finite differences: max rel err {err:.2e}")

# --- soft-argmax ------------------------------------------------------------
# a peaked correlation map: the head returns the peak's grid coordinates
corr = np.full((8, 8), -1.0)
corr[5, 2] = 1.0
gx, gy = soft_argmax(Tensor(corr), tau=20.0, mask_radius=5.0).data
print(f"one-hot peak at column 2, row 5 -> soft-argmax ({gx:.3f}, {gy:.3f})")

# the full head is differentiable end to end: feature gradients exist
feats = Tensor(np.random.default_rng(2).standard_normal((4, 8, 8, 16)), requires_grad=True)
preds = track_batch(feats, [QueryPoint(x=12.0, y=20.0, t=0)], patch=8,
                    matcher=MatcherConfig(tau=20.0, mask_radius=5.0))
tt.tsum(preds).backward()
print("nonzero feature gradients through the head:", np.any(feats.grad != 0))
