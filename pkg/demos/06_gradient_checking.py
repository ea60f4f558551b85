"""
Verifying gradients with finite differences
===========================================

Every layer's backward pass is hand-written, so the package ships the same
tool its own test suite uses: central finite differences against the
autodiff gradients. The check needs float64 inputs because a 1e-5 step
disappears in float32 rounding.
"""

import numpy as np

from protoseg.autodiff import Tensor, sepconv2d, softmax_rowwise, tsum
from protoseg.gradcheck import gradient_check
from protoseg.losses import pretrain_loss

rng = np.random.default_rng(0)

# A quadratic readout of a separable convolution: two parameter tensors and
# the input are all perturbed element by element.
x = Tensor(rng.normal(size=(1, 6, 6, 3)))
depthwise = Tensor(rng.normal(size=(3, 3, 3)))
pointwise = Tensor(rng.normal(size=(3, 5)))

report = gradient_check(
    lambda a, d, p: tsum(sepconv2d(a, d, p) ** 2.0),
    [x, depthwise, pointwise],
    names=["input", "depthwise", "pointwise"],
)
print(f"sepconv2d: passed={report.passed}, "
      f"max rel error {report.max_rel_error:.2e} at {report.worst_input}")

# Composite objectives check the same way; going through the softmax keeps
# the probabilities on the simplex while the logits take the perturbation.
logits = Tensor(rng.normal(size=(2, 5, 5, 4)))
labels = rng.integers(0, 4, size=(2, 5, 5))

report = gradient_check(
    lambda lg: pretrain_loss(softmax_rowwise(lg, axis=-1), labels).total,
    [logits],
    names=["logits"],
)
print(f"pretrain loss: passed={report.passed}, max rel error {report.max_rel_error:.2e}")

# Large tensors are subsampled: max_elements picks random coordinates per
# tensor instead of sweeping all of them, which is what keeps whole-encoder
# checks affordable.
big = Tensor(rng.normal(size=(4, 16, 16, 8)))
report = gradient_check(
    lambda t: tsum(t * t * 0.5), [big],
    max_elements=5, rng=np.random.default_rng(1),
)
print(f"subsampled: checked {report.checked_elements} of {big.data.size} elements, "
      f"passed={report.passed}")
