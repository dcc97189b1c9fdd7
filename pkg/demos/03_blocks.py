"""The detector's building blocks and the identities they rely on.

Run: python3 demos/03_blocks.py
"""
import numpy as np

from spmamba.blocks import (PSA, SPPELAN, ODSSBlock, ODSSConfig, PSAConfig, SPPELANConfig, vcm_rearrange,
                            vcm_restore)
from spmamba.tensor import Tensor, maxpool2d

rng = np.random.default_rng(0)

# Vision clue merge starts from a lossless 2x2 phase split: half the size, four times the channels.
x = rng.normal(size=(1, 2, 4, 6))
phases = vcm_rearrange(Tensor(x))
print("phase split:", x.shape, "->", phases.shape, " restored exactly:", np.array_equal(vcm_restore(phases), x))

# The ODSS block mixes local convolution, the 2-D scan and a gated refinement inside a residual.
block = ODSSBlock(ODSSConfig(8, state_dim=4), rng)
print("odss block keeps shape:", block(Tensor(rng.normal(size=(2, 8, 6, 6)))).shape)

# PSA splits channels into multi-kernel branches and re-weights them with a softmax across branches.
psa = PSA(PSAConfig(64), rng)
# A freshly initialised module starts close to uniform weights of 1/4.
feats, att = psa.attention(Tensor(rng.normal(scale=3.0, size=(1, 64, 6, 6))))
print("psa branch weights, first channel of each branch:", np.round(att.data[0, :, 0], 5),
      " sum:", round(float(att.data[0, :, 0].sum()), 15))

# SPPELAN reuses one 5x5 pool: two in a row equal a 9x9 pool, three equal 13x13.
t = Tensor(rng.normal(size=(1, 1, 12, 12)))
p5 = maxpool2d(t, 5, 1, 2)
print("pool5 twice == pool9:", np.array_equal(maxpool2d(p5, 5, 1, 2).data, maxpool2d(t, 9, 1, 4).data))
spp = SPPELAN(SPPELANConfig(8, 4, 8), rng)
print("sppelan keeps shape:", spp(Tensor(rng.normal(size=(1, 8, 5, 5)))).shape)
