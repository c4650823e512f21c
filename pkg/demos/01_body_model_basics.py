"""Posing the parametric body: parameters in, mesh and joints out.

Walks through the 88-dim parameter vector, the procedural toy template,
and what each group of parameters does: shape coefficients resize body
segments, joint rotations articulate the kinematic tree, and the global
(u, v) pairs + translation place the body on the bed.
"""

import numpy as np
import torch

from bedmesh.body_model import (
    GenderFlag,
    SmplParams,
    decode_global_rotation,
    forward,
    make_toy_template,
    pack,
)

templates = make_toy_template(240, seed=0)
print(f"toy template: {templates.n_vertices} vertices, "
      f"{templates.female.faces.shape[0]} triangles, 24 joints")

# Identity pose: all rotations zero, cosine-like components at 1.
rest = SmplParams.zeros()
mesh = forward(rest, GenderFlag.female(), templates)
print(f"\nidentity pose: pelvis at {mesh.joints[0].numpy().round(3)}, "
      f"head at {mesh.joints[15].numpy().round(3)}")
print(f"flat parameter vector has length {pack(rest).shape[0]}")

# Shape coefficients: beta[2] lengthens the legs.
long_legs = SmplParams(
    beta=torch.tensor([0, 0, 2.0, 0, 0, 0, 0, 0, 0, 0], dtype=torch.float64),
    theta=rest.theta, s=rest.s, u=rest.u, v=rest.v,
)
stretched = forward(long_legs, GenderFlag.female(), templates)
ankle_shift = (stretched.joints[7] - mesh.joints[7]).numpy()
print(f"\nbeta[2] = +2 moves the left ankle by {np.round(ankle_shift, 3)} m")

# Joint rotations: bend the left knee.
theta = torch.zeros(23, 3, dtype=torch.float64)
theta[3, 1] = 0.8  # knee_l is body joint 4 -> row 3
bent = forward(SmplParams(beta=rest.beta, theta=theta, s=rest.s, u=rest.u, v=rest.v),
               GenderFlag.female(), templates)
print(f"bending the left knee raises the ankle from "
      f"z={mesh.joints[7, 2]:.3f} to z={bent.joints[7, 2]:.3f} m")

# Global rotation comes from per-axis (u, v) pairs via atan2.
phi = np.array([0.0, 0.0, 0.35])
turned = SmplParams(beta=rest.beta, theta=rest.theta,
                    s=torch.tensor([0.1, -0.05, 0.0], dtype=torch.float64),
                    u=torch.from_numpy(np.sin(phi)), v=torch.from_numpy(np.cos(phi)))
decoded = decode_global_rotation(turned.u, turned.v)
print(f"\n(u, v) decode back to angles {decoded.numpy().round(3)} rad "
      f"(yaw of 0.35 about the vertical)")
posed = forward(turned, GenderFlag.female(), templates)
print(f"pelvis moved to {posed.joints[0].numpy().round(3)} m")

# Gendered templates differ in proportions.
male = forward(rest, GenderFlag.male(), templates)
female_hips = mesh.joints[1, 1] - mesh.joints[2, 1]
male_hips = male.joints[1, 1] - male.joints[2, 1]
print(f"\nhip width: female {female_hips:.3f} m vs male {male_hips:.3f} m")
