"""Synthetic depth scenes: rendering, blankets, domain shift, augmentation.

Renders a posed body into an overhead depth image, drapes the two blanket
approximations over it, perturbs it into the pseudo-real domain, and shows
the augmentation operations. Writes a montage to demos/output/.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from bedmesh.body_model import BodyMesh, lbs_forward, make_toy_template, pack
from bedmesh.data import (
    AugmentPolicy,
    ParamRanges,
    SceneConfig,
    ShiftProfile,
    apply_cover,
    augment,
    domain_shift,
    render_depth,
    sample_params,
)

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

templates = make_toy_template(240, seed=0)
scene = SceneConfig()
ranges = ParamRanges()
rng = np.random.default_rng(7)

params, gender = sample_params(rng, ranges, templates)
template = templates.for_gender(gender)
verts, joints = lbs_forward(pack(params)[None], template)
mesh = BodyMesh(vertices=verts[0], joints=joints[0], faces=template.faces)

depth, clipped = render_depth(mesh, scene)
print(f"rendered {scene.image_size} depth image "
      f"(range {depth.min():.3f}..{depth.max():.3f} m, clipped={clipped})")

panels = {"uncovered": depth}
panels["thin blanket"] = apply_cover(depth, "cover1", np.random.default_rng(1))
panels["thick blanket"] = apply_cover(depth, "cover2", np.random.default_rng(1))
panels["pseudo-real"] = domain_shift(depth, np.random.default_rng(2), ShiftProfile())
aug_policy = AugmentPolicy(p_rotate=1.0, p_erase=1.0, p_noise=1.0)
panels["augmented"], angle = augment(depth, np.random.default_rng(3), aug_policy)
print(f"augmentation drew rotation angle {angle:.1f} deg plus erase and noise")

fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 5))
for ax, (title, img) in zip(axes, panels.items()):
    ax.imshow(img, cmap="viridis_r", vmin=1.6, vmax=2.05)
    ax.set_title(title, fontsize=9)
    ax.axis("off")
fig.tight_layout()
path = out_dir / "scene_montage.png"
fig.savefig(path, dpi=110)
print(f"montage written to {path}")

flat = apply_cover(np.full(scene.image_size, scene.camera_height), "cover2",
                   np.random.default_rng(4))
changed = np.nonzero((flat != scene.camera_height).any(axis=1))[0]
print(f"on an empty bed the blanket is just a constant offset over rows "
      f"{changed[0]}..{changed[-1]} (15 mm closer to the camera)")
