import math

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from bedmesh.body_model import (
    KINEMATIC_PARENTS,
    NUM_JOINTS,
    PARAM_DIM,
    BodyTemplate,
    GenderFlag,
    InvalidRotationError,
    SmplParams,
    TemplateError,
    decode_global_rotation,
    euler_xyz_from_matrix,
    euler_xyz_matrix,
    forward,
    lbs_forward,
    load_template,
    load_template_set,
    make_toy_template,
    pack,
    rodrigues,
    save_template,
    save_template_set,
    unpack,
)


@pytest.fixture(scope="module")
def templates():
    return make_toy_template(240, seed=0)


def _fk_oracle(flat, template):
    """Independent decode: affine-pair forward kinematics + explicit LBS sum."""
    flat = np.asarray(flat, dtype=np.float64)
    beta, theta = flat[:10], flat[10:79].reshape(23, 3)
    s, u, v = flat[79:82], flat[82:85], flat[85:88]
    rest = template.rest_vertices.numpy().astype(np.float64)
    dirs = template.shape_dirs.numpy().astype(np.float64)
    shaped = rest + dirs @ beta
    J = template.joint_regressor.numpy().astype(np.float64) @ shaped

    phi = np.arctan2(u, v)
    rots = np.concatenate([
        Rotation.from_euler("XYZ", phi).as_matrix()[None],
        Rotation.from_rotvec(theta).as_matrix(),
    ])
    R_w = [None] * NUM_JOINTS
    t_w = [None] * NUM_JOINTS
    R_w[0] = rots[0]
    t_w[0] = J[0] + s - rots[0] @ J[0]
    for j in range(1, NUM_JOINTS):
        p = KINEMATIC_PARENTS[j]
        R_w[j] = R_w[p] @ rots[j]
        t_w[j] = R_w[p] @ J[j] + t_w[p] - R_w[j] @ J[j]
    joints = np.stack([R_w[j] @ J[j] + t_w[j] for j in range(NUM_JOINTS)])

    weights = template.skin_weights.numpy().astype(np.float64)
    verts = np.zeros_like(shaped)
    for k in range(NUM_JOINTS):
        verts += weights[:, k:k + 1] * (shaped @ R_w[k].T + t_w[k])
    return verts, joints


# ---------------------------------------------------------------------------
# pack / unpack
# ---------------------------------------------------------------------------

def test_pack_zero_fields():
    p = SmplParams.zeros()
    p = SmplParams(beta=p.beta, theta=p.theta, s=p.s, u=p.u, v=torch.zeros(3))
    assert torch.equal(pack(p), torch.zeros(PARAM_DIM, dtype=torch.float64))


def test_pack_basis_vector():
    beta = torch.zeros(10)
    beta[0] = 1.0
    p = SmplParams(beta=beta, theta=torch.zeros(23, 3), s=torch.zeros(3),
                   u=torch.zeros(3), v=torch.zeros(3))
    expected = torch.zeros(PARAM_DIM)
    expected[0] = 1.0
    assert torch.equal(pack(p), expected)


def test_unpack_pack_roundtrip_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = torch.from_numpy(rng.normal(size=PARAM_DIM))
        assert torch.equal(pack(unpack(x)), x)


def test_pack_unpack_roundtrip_fields():
    rng = np.random.default_rng(8)
    p = SmplParams(
        beta=torch.from_numpy(rng.normal(size=10)),
        theta=torch.from_numpy(rng.normal(size=(23, 3))),
        s=torch.from_numpy(rng.normal(size=3)),
        u=torch.from_numpy(rng.normal(size=3)),
        v=torch.from_numpy(rng.normal(size=3)),
    )
    q = unpack(pack(p))
    for name in ("beta", "theta", "s", "u", "v"):
        assert torch.equal(getattr(p, name), getattr(q, name))


def test_unpack_rejects_wrong_length():
    with pytest.raises(ValueError, match="88"):
        unpack(torch.zeros(87))


# ---------------------------------------------------------------------------
# global rotation decode
# ---------------------------------------------------------------------------

def test_decode_zero_angles():
    phi = decode_global_rotation(torch.zeros(3), torch.ones(3))
    assert torch.equal(phi, torch.zeros(3))


def test_decode_right_angle():
    phi = decode_global_rotation(torch.tensor([1.0, 0.0, 0.0]),
                                 torch.tensor([0.0, 1.0, 1.0]))
    assert torch.allclose(phi, torch.tensor([math.pi / 2, 0.0, 0.0]))


def test_decode_diagonal():
    phi = decode_global_rotation(torch.ones(3), torch.ones(3))
    assert torch.allclose(phi, torch.full((3,), math.pi / 4))


def test_decode_scale_invariance():
    rng = np.random.default_rng(3)
    u = torch.from_numpy(rng.normal(size=3))
    v = torch.from_numpy(rng.normal(size=3))
    assert torch.allclose(decode_global_rotation(u, v),
                          decode_global_rotation(17.0 * u, 17.0 * v))


def test_decode_degenerate_pair_rejected():
    with pytest.raises(InvalidRotationError, match="indices"):
        decode_global_rotation(torch.tensor([0.0, 1.0, 0.0]),
                               torch.tensor([1.0, 1.0, 0.0]))


def test_decode_range_half_open():
    phi = decode_global_rotation(torch.tensor([0.0, -0.0, 0.0]),
                                 torch.tensor([-1.0, -1.0, 1.0]))
    assert phi[0] == math.pi
    assert phi[1] == math.pi  # -pi is normalized to +pi


def test_euler_matrix_matches_scipy():
    rng = np.random.default_rng(11)
    for _ in range(10):
        phi = rng.uniform(-1.2, 1.2, size=3)
        ours = euler_xyz_matrix(torch.from_numpy(phi)).numpy()
        ref = Rotation.from_euler("XYZ", phi).as_matrix()
        assert np.allclose(ours, ref, atol=1e-12)


def test_euler_matrix_roundtrip():
    rng = np.random.default_rng(12)
    for _ in range(10):
        phi = torch.from_numpy(rng.uniform(-1.2, 1.2, size=3))
        R = euler_xyz_matrix(phi)
        assert torch.allclose(euler_xyz_from_matrix(R), phi, atol=1e-12)


def test_rodrigues_matches_scipy():
    rng = np.random.default_rng(13)
    w = rng.normal(size=(50, 3))
    ours = rodrigues(torch.from_numpy(w)).numpy()
    ref = Rotation.from_rotvec(w).as_matrix()
    assert np.allclose(ours, ref, atol=1e-12)
    # smooth at the identity
    assert np.allclose(rodrigues(torch.zeros(3)).numpy(), np.eye(3), atol=1e-15)


# ---------------------------------------------------------------------------
# forward / LBS
# ---------------------------------------------------------------------------

def _identity_params(dtype=torch.float64):
    return SmplParams.zeros(dtype)


def test_forward_identity_pose(templates):
    mesh = forward(_identity_params(), GenderFlag.female(), templates)
    t = templates.female
    rest = t.rest_vertices.to(torch.float64)
    assert torch.allclose(mesh.vertices, rest, atol=1e-12)
    expected_joints = t.joint_regressor.to(torch.float64) @ rest
    assert torch.allclose(mesh.joints, expected_joints, atol=1e-12)


def test_forward_translation_equivariance(templates):
    base = forward(_identity_params(), GenderFlag.male(), templates)
    p = _identity_params()
    s = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
    moved = forward(SmplParams(beta=p.beta, theta=p.theta, s=s, u=p.u, v=p.v),
                    GenderFlag.male(), templates)
    assert torch.allclose(moved.vertices, base.vertices + s, atol=1e-12)
    assert torch.allclose(moved.joints, base.joints + s, atol=1e-12)


def test_forward_global_rotation_oracle(templates):
    # theta = 0: result must equal direct matrix application about the root
    rng = np.random.default_rng(21)
    t = templates.female
    rest = t.rest_vertices.numpy().astype(np.float64)
    root = (t.joint_regressor.numpy().astype(np.float64) @ rest)[0]
    for _ in range(5):
        phi = rng.uniform(-0.6, 0.6, size=3)
        s = rng.normal(size=3)
        p = SmplParams(
            beta=torch.zeros(10, dtype=torch.float64),
            theta=torch.zeros(23, 3, dtype=torch.float64),
            s=torch.from_numpy(s),
            u=torch.from_numpy(np.sin(phi)),
            v=torch.from_numpy(np.cos(phi)),
        )
        mesh = forward(p, GenderFlag.female(), templates)
        R = Rotation.from_euler("XYZ", phi).as_matrix()
        expected = (rest - root) @ R.T + root + s
        assert np.abs(mesh.vertices.numpy() - expected).max() < 1e-6


def test_rigid_equivariance_on_joints(templates):
    rng = np.random.default_rng(22)
    phi = rng.uniform(-0.5, 0.5, size=3)
    s = rng.normal(size=3)
    p0 = _identity_params()
    base = forward(p0, GenderFlag.male(), templates)
    p = SmplParams(beta=p0.beta, theta=p0.theta, s=torch.from_numpy(s),
                   u=torch.from_numpy(np.sin(phi)), v=torch.from_numpy(np.cos(phi)))
    posed = forward(p, GenderFlag.male(), templates)
    R = Rotation.from_euler("XYZ", phi).as_matrix()
    root = base.joints[0].numpy()
    expected = (base.joints.numpy() - root) @ R.T + root + s
    assert np.abs(posed.joints.numpy() - expected).max() < 1e-6


def test_forward_full_pose_against_oracle(templates):
    rng = np.random.default_rng(23)
    for gender in (GenderFlag.female(), GenderFlag.male()):
        t = templates.for_gender(gender)
        flat = np.concatenate([
            rng.uniform(-2, 2, size=10),
            rng.uniform(-0.6, 0.6, size=69),
            rng.normal(size=3) * 0.1,
            np.sin(rng.uniform(-0.5, 0.5, size=3)),
            np.cos(rng.uniform(-0.5, 0.5, size=3)),
        ])
        verts, joints = lbs_forward(torch.from_numpy(flat)[None], t)
        overts, ojoints = _fk_oracle(flat, t)
        assert np.abs(verts[0].numpy() - overts).max() < 1e-9
        assert np.abs(joints[0].numpy() - ojoints).max() < 1e-9


def test_joint_consistency_markers(templates):
    # the first 24 vertices are joint markers: posed markers == posed joints
    rng = np.random.default_rng(24)
    flat = np.concatenate([
        rng.uniform(-2, 2, size=10),
        rng.uniform(-0.5, 0.5, size=69),
        rng.normal(size=3) * 0.1,
        np.sin(rng.uniform(-0.4, 0.4, size=3)),
        np.cos(rng.uniform(-0.4, 0.4, size=3)),
    ])
    verts, joints = lbs_forward(torch.from_numpy(flat)[None], templates.female)
    assert (verts[0, :NUM_JOINTS] - joints[0]).abs().max() < 1e-9


def test_single_weight_vertex_moves_rigidly(templates):
    t = templates.female
    w = t.skin_weights.numpy()
    # a vertex fully bound to one bone keeps its distance to that joint
    idx = next(i for i in range(NUM_JOINTS, t.n_vertices)
               if w[i].max() == 1.0 and w[i].argmax() > 0)
    bone = int(w[idx].argmax())
    rng = np.random.default_rng(25)
    flat = np.concatenate([
        np.zeros(10), rng.uniform(-0.8, 0.8, size=69), np.zeros(3),
        np.zeros(3), np.ones(3),
    ])
    verts, joints = lbs_forward(torch.from_numpy(flat)[None], t)
    rest = t.rest_vertices.numpy().astype(np.float64)
    rest_joints = t.joint_regressor.numpy().astype(np.float64) @ rest
    d_rest = np.linalg.norm(rest[idx] - rest_joints[bone])
    d_posed = np.linalg.norm(verts[0, idx].numpy() - joints[0, bone].numpy())
    assert abs(d_rest - d_posed) < 1e-9


def test_batched_matches_single(templates):
    rng = np.random.default_rng(26)
    flats = np.stack([np.concatenate([
        rng.uniform(-1, 1, size=10), rng.uniform(-0.4, 0.4, size=69),
        rng.normal(size=3) * 0.1, np.sin(rng.uniform(-0.3, 0.3, size=3)),
        np.cos(rng.uniform(-0.3, 0.3, size=3)),
    ]) for _ in range(4)])
    vb, jb = lbs_forward(torch.from_numpy(flats), templates.male)
    for i in range(4):
        v1, j1 = lbs_forward(torch.from_numpy(flats[i])[None], templates.male)
        assert torch.allclose(vb[i], v1[0], atol=1e-12)
        assert torch.allclose(jb[i], j1[0], atol=1e-12)


def test_forward_propagates_invalid_rotation(templates):
    p0 = _identity_params()
    p = SmplParams(beta=p0.beta, theta=p0.theta, s=p0.s,
                   u=torch.zeros(3), v=torch.zeros(3))
    with pytest.raises(InvalidRotationError):
        forward(p, GenderFlag.female(), templates)


# ---------------------------------------------------------------------------
# toy template
# ---------------------------------------------------------------------------

def test_toy_template_deterministic():
    a = make_toy_template(240, seed=0)
    b = make_toy_template(240, seed=0)
    for ta, tb in ((a.female, b.female), (a.male, b.male)):
        for name in ("rest_vertices", "shape_dirs", "joint_regressor",
                     "kinematic_parents", "skin_weights", "faces"):
            assert torch.equal(getattr(ta, name), getattr(tb, name))


def test_toy_template_seed_changes_layout():
    a = make_toy_template(240, seed=0)
    b = make_toy_template(240, seed=1)
    assert not torch.equal(a.female.rest_vertices, b.female.rest_vertices)


def test_toy_template_invariants(templates):
    for t in (templates.female, templates.male):
        assert torch.all(t.skin_weights >= 0)
        assert (t.skin_weights.sum(dim=1) - 1.0).abs().max() < 1e-6
        assert (t.joint_regressor.sum(dim=1) - 1.0).abs().max() < 1e-6
        assert t.kinematic_parents[0] == -1
        assert t.faces.max() < t.n_vertices


def test_toy_template_genders_differ(templates):
    assert not torch.equal(templates.female.rest_vertices, templates.male.rest_vertices)


def test_toy_template_shape_dirs_full_rank(templates):
    base = forward(_identity_params(), GenderFlag.female(), templates)
    for k in range(10):
        beta = torch.zeros(10, dtype=torch.float64)
        beta[k] = 1.0
        p0 = _identity_params()
        p = SmplParams(beta=beta, theta=p0.theta, s=p0.s, u=p0.u, v=p0.v)
        mesh = forward(p, GenderFlag.female(), templates)
        delta = (mesh.vertices - base.vertices).abs().max()
        assert delta > 1e-4, f"shape direction {k} has no effect"


def test_toy_template_too_small_rejected():
    with pytest.raises(ValueError, match=">= 24"):
        make_toy_template(10, seed=0)


# ---------------------------------------------------------------------------
# template IO
# ---------------------------------------------------------------------------

def test_template_file_roundtrip(tmp_path, templates):
    path = tmp_path / "template.zip"
    save_template(path, templates.female)
    loaded = load_template(path)
    assert torch.equal(loaded.rest_vertices, templates.female.rest_vertices)
    assert torch.equal(loaded.skin_weights, templates.female.skin_weights)
    assert torch.equal(loaded.faces, templates.female.faces)


def test_template_set_roundtrip(tmp_path, templates):
    path = tmp_path / "set.zip"
    save_template_set(path, templates)
    loaded = load_template_set(path)
    assert torch.equal(loaded.male.rest_vertices, templates.male.rest_vertices)
    assert torch.equal(loaded.female.shape_dirs, templates.female.shape_dirs)


def test_template_shape_mismatch_rejected(templates):
    t = templates.female
    with pytest.raises(TemplateError, match="skin_weights"):
        BodyTemplate(
            rest_vertices=t.rest_vertices,
            shape_dirs=t.shape_dirs,
            joint_regressor=t.joint_regressor,
            kinematic_parents=t.kinematic_parents,
            skin_weights=t.skin_weights[:-1],
            faces=t.faces,
        )


def test_template_bad_weights_rejected(templates):
    t = templates.female
    bad = t.skin_weights.clone()
    bad[0] *= 2.0
    with pytest.raises(TemplateError, match="sum to 1"):
        BodyTemplate(
            rest_vertices=t.rest_vertices, shape_dirs=t.shape_dirs,
            joint_regressor=t.joint_regressor, kinematic_parents=t.kinematic_parents,
            skin_weights=bad, faces=t.faces,
        )


def test_gender_flag_validation():
    assert GenderFlag.female().is_female
    assert not GenderFlag.male().is_female
    with pytest.raises(ValueError):
        GenderFlag(np.array([1, 1]))
