"""
Compressing a soft label
========================

A teacher distribution over C classes is squeezed into a few numbers and
expanded again at training time. Here we look at what each scheme keeps.
"""

import numpy as np

from fkd.core import softmax
from fkd.quantize import (FULL, SMOOTH, compress, harden, marginal_renorm_mode,
                          marginal_smooth_mode, recover)

np.set_printoptions(precision=3, suppress=True)

rng = np.random.default_rng(0)
z = rng.standard_normal(8) * 2
p = softmax(z)
print("teacher      ", p)

print("hard         ", recover(harden(z), 8))
print("smooth       ", recover(compress(p, SMOOTH), 8))

# Marginal smoothing keeps the top K and spreads the leftover mass evenly
print("ms@3         ", recover(compress(p, marginal_smooth_mode(3)), 8))

# Renormalizing instead puts exact zeros everywhere else
print("mr@3         ", recover(compress(p, marginal_renorm_mode(3)), 8))

# Full mode is lossless
assert np.array_equal(recover(compress(p, FULL), 8), p)
