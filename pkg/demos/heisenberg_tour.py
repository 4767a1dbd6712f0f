"""
The Heisenberg group: brackets, heat kernel and control distance
================================================================

Two horizontal fields generate the whole tangent space after one bracket.
The heat kernel is estimated from simulated paths and the control distance
to points on the vertical axis grows like the square root of the height.
"""

import numpy as np

from hypobridge.ccdist import cc_distance_batch
from hypobridge.heatkernel import kernel_value, mc_kde_kernel
from hypobridge.models import hormander_level, lie_bracket, make_model, sample_points

sys = make_model("heisenberg")

# one bracket is enough everywhere
pts = sample_points(sys.space, 200, seed=1)
print("bracket levels:", np.unique(hormander_level(sys, pts)))
print("[X1, X2] at the origin:", lie_bracket(*sys.diffusion, np.zeros(3)))

# Monte Carlo heat kernel at t = 0.25 from the origin
k = mc_kde_kernel(sys, np.zeros(3), [0.25], n_paths=20000, seed=1, dt=2.5e-3, bandwidth=0.5, debias=True)
ys = np.array([[0, 0, 0], [0.3, 0, 0], [0, 0, 0.08]])
v, se = kernel_value(k, 0.25, np.zeros(3), ys)
for y, a, b in zip(ys, v, se):
    print(f"p_0.25(0, {y}) = {a:.4f} +- {b:.4f}")

# distance to (0, 0, z) against sqrt(4 pi z)
zs = np.array([0.05, 0.1, 0.2, 0.4])
d, res, _, _ = cc_distance_batch(sys, np.zeros((4, 3)), np.c_[0 * zs, 0 * zs, zs], seed=1)
for z, dz in zip(zs, d):
    print(f"d(0, (0,0,{z})) = {dz:.4f}   sqrt(4 pi z) = {np.sqrt(4 * np.pi * z):.4f}")
print("fitted exponent:", np.polyfit(np.log(zs), np.log(d), 1)[0])
