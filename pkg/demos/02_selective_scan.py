"""Zero-order-hold discretisation, the selective scan, and the four-route 2-D scan.

Run: python3 demos/02_selective_scan.py
"""
import numpy as np

from spmamba.ssm import ROUTES, discretize_zoh, init_ssm_params, route_sequences, ss2d_scan, ssm_scan
from spmamba.tensor import Tensor

# One state with a = -2 held for a step of 0.1: a_bar = exp(-0.2), b_bar = (a_bar - 1) / a * b.
a_bar, b_bar = discretize_zoh(-2.0, 1.0, 0.1)
print(f"a_bar = {a_bar:.6f}  b_bar = {b_bar:.6f}")
# Tiny steps switch to the series limit instead of dividing 0 by 0.
print("tiny step:", discretize_zoh(-2.0, 1.0, 1e-12))

# A selective scan: the step size and the B/C projections depend on each token.
rng = np.random.default_rng(0)
params, proj = init_ssm_params(channels=3, state_dim=4, rng=rng)
x = Tensor(rng.normal(size=(8, 3)))
y = ssm_scan(x, params, proj)
print("scan output (L=8, C=3):\n", np.round(y.data, 4))

# Readout C_t is projected from the current token, so a zero token reads nothing out.  Over a
# constant background, the extra response to a kick at t=0 shows the state's fading memory.
base = np.full((8, 3), 0.5)
kicked = base.copy()
kicked[0] += 1.0
memory = ssm_scan(Tensor(kicked), params, proj).data - ssm_scan(Tensor(base), params, proj).data
print("response to a kick at t=0, channel 0:", np.round(memory[:, 0], 5))

# The 2-D scan flattens a grid along four routes.  Cell values are their raster index.
grid = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
for name, seq in zip(ROUTES, route_sequences(grid)):
    print(f"{name:13s}", seq.data[0, :, 0].astype(int).tolist())

# Each route is scanned and mapped back to the grid, then the four maps are summed.
fmap = Tensor(rng.normal(size=(1, 3, 4, 4)))
print("ss2d output shape:", ss2d_scan(fmap, params, proj).shape)
