"""Closed-form values of the contrastive loss next to the library's numbers."""
import math

import numpy as np

from rsllm.alignment import LossConfig, info_nce, total_loss
from rsllm.core import Tensor

for n in (2, 4, 8):
    same = Tensor(np.ones((n, 3)))
    print(f"N={n}: all cosines equal -> {float(info_nce(same, same, 0.5).data):.12f}  (ln N = {math.log(n):.12f})")

e = Tensor(np.eye(2))
print(f"orthonormal pair at tau 0.5 -> {float(info_nce(e, e, 0.5).data):.12f}  "
      f"(ln(1 + e^-2) = {math.log1p(math.exp(-2)):.12f})")

rng = np.random.default_rng(0)
q, k = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
base = float(info_nce(Tensor(q), Tensor(k), 0.5).data)
scaled = float(info_nce(Tensor(q * rng.uniform(0.1, 10, (6, 1))), Tensor(k * 3.0), 0.5).data)
print(f"rescaling rows changes the loss by {abs(scaled - base):.1e}")

print("total loss (1, 2, 3) with gamma 0.3, beta 0.4 ->", total_loss(1, 2, 3, LossConfig(0.3, 0.4)))
