"""The forward/reverse diffusion over parameter vectors, without any network.

Shows the variance schedule destroying signal, the closed-form jump to any
noise level, ancestral reconstruction with an oracle denoiser, and why the
deterministic strided sampler returns the oracle's prediction exactly.
"""

import numpy as np

from bedmesh.diffusion import (
    LatentStandardizer,
    ddim_sample,
    ddim_timesteps,
    ddpm_step,
    make_schedule,
    q_sample,
)

sched = make_schedule(100)
print("schedule: T=100, alpha_bar at t=0/50/99:",
      np.round(sched.alpha_bar[[0, 50, 99]], 4))
print("by t=99 the signal fraction sqrt(alpha_bar) is "
      f"{np.sqrt(sched.alpha_bar[99]):.4f} -- almost pure noise")

rng = np.random.default_rng(0)
x0 = rng.normal(size=88)

# Jump straight to noise level t with the closed form.
for t in (10, 50, 99):
    x_t = q_sample(x0, t, rng.standard_normal(88), sched)
    print(f"t={t:3d}: correlation(x_t, x0) = {np.corrcoef(x_t, x0)[0, 1]:+.3f}")

# Ancestral chain with an oracle that always predicts the true x0: the
# scaled error shrinks as t decreases.
x = rng.standard_normal(88)
print("\nancestral chain with an oracle denoiser:")
for t in range(99, 0, -1):
    if t in (99, 75, 50, 25, 1):
        err = np.linalg.norm(x / np.sqrt(sched.alpha_bar[t]) - x0)
        print(f"  t={t:3d}: scaled error {err:8.3f}")
    x = ddpm_step(x0, x, t, rng.standard_normal(88), sched)
print(f"  final: error {np.linalg.norm(x - x0):.4f}")

# The strided deterministic sampler visits a uniform subsequence and
# returns the final clean-sample prediction, so an oracle is a fixed point.
print("\nstrided sampler timesteps for 5 steps:", ddim_timesteps(100, 5))
out = ddim_sample(lambda xx, tt: np.broadcast_to(x0, xx.shape), 5, sched, seed=1)
print("oracle fixed point, max |out - x0|:", np.abs(out[0] - x0).max())

# Standardization: diffusion runs in z-scored parameter space.
data = rng.normal(loc=3.0, scale=[0.1, 2.0] * 44, size=(500, 88))
st = LatentStandardizer.fit(data)
z = st.standardize(data[0])
print(f"\nz-scored sample: mean {z.mean():+.3f}, std {z.std():.3f} "
      "(raw components had wildly different scales)")
