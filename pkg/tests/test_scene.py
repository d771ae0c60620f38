import numpy as np
import pytest

from rnsim.scene import (
    Gaussian,
    SceneFormatError,
    SceneModel,
    gen_forest,
    extract_point_cloud,
    load_scene,
    quat_to_rot,
    rotate_scene_z,
    save_scene,
    shading_normals,
)
from rnsim.sh import eval_basis


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def one_gaussian_scene(opacity=0.8):
    g = Gaussian(
        position=np.array([0.5, -0.25, 1.0]),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        scale=np.array([0.3, 0.2, 0.1]),
        opacity=opacity,
        albedo=np.array([0.6, 0.4, 0.2]),
        transfer=np.arange(9.0) / 10.0,
        baked=np.ones((3, 9)) * 0.5,
    )
    return SceneModel.from_gaussians(
        [g], degree=2, bounds=[[-2, -2, -2], [2, 2, 2]], name="unit", seed=7)


def test_save_load_round_trip_bit_exact(tmp_path):
    scene = one_gaussian_scene()
    path = tmp_path / "one.rns"
    save_scene(scene, path)
    loaded = load_scene(path)
    for attr in ("positions", "rotations", "scales", "opacities",
                 "albedos", "transfer", "baked", "bounds"):
        assert np.array_equal(getattr(scene, attr), getattr(loaded, attr)), attr
    assert loaded.degree == scene.degree
    assert loaded.name == scene.name
    assert loaded.seed == scene.seed


def test_forest_round_trip_bit_exact(tmp_path):
    scene = gen_forest(seed=3, size=20.0, n_trees=4)
    path = tmp_path / "forest.rns"
    save_scene(scene, path)
    loaded = load_scene(path)
    assert np.array_equal(scene.positions, loaded.positions)
    assert np.array_equal(scene.transfer, loaded.transfer)
    assert np.array_equal(scene.baked, loaded.baked)


def test_invalid_opacity_names_gaussian_index(tmp_path):
    scene = one_gaussian_scene()
    path = tmp_path / "bad.rns"
    save_scene(scene, path)
    raw = bytearray(path.read_bytes())
    # opacity array follows positions(3) + rotations(4) + scales(3) floats
    header_len = raw.index(b"\n") + 1
    off = header_len + (3 + 4 + 3) * 4
    raw[off : off + 4] = np.array([1.5], dtype="<f4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(SceneFormatError, match="Gaussian 0"):
        load_scene(path)


def test_truncated_file_is_parse_error(tmp_path):
    scene = one_gaussian_scene()
    path = tmp_path / "trunc.rns"
    save_scene(scene, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 10])
    with pytest.raises(SceneFormatError, match="truncated"):
        load_scene(path)


def test_version_mismatch(tmp_path):
    scene = one_gaussian_scene()
    path = tmp_path / "ver.rns"
    save_scene(scene, path)
    data = path.read_bytes()
    path.write_bytes(data.replace(b'"version": 1', b'"version": 9', 1))
    with pytest.raises(SceneFormatError, match="version"):
        load_scene(path)


def test_covariance_reconstruction():
    rng = np.random.default_rng(11)
    n = 64
    quats = np.array([random_quat(rng) for _ in range(n)])
    scales = rng.uniform(0.05, 2.0, size=(n, 3))
    scene = SceneModel(
        positions=np.zeros((n, 3)), rotations=quats, scales=scales,
        opacities=np.full(n, 0.5), albedos=np.full((n, 3), 0.5),
        transfer=np.zeros((n, 9)), baked=None, degree=2,
        bounds=[[-1, -1, -1], [1, 1, 1]])
    cov = scene.covariances()
    assert np.allclose(cov, cov.transpose(0, 2, 1), atol=1e-12)
    eig = np.sort(np.linalg.eigvalsh(cov), axis=1)
    # float32 storage of scales costs ~1e-7 relative accuracy
    expected = np.sort(scene.scales.astype(np.float64) ** 2, axis=1)
    assert np.allclose(eig, expected, atol=1e-9, rtol=1e-5)


def test_forest_determinism():
    a = gen_forest(seed=5, size=24.0, n_trees=6)
    b = gen_forest(seed=5, size=24.0, n_trees=6)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.albedos, b.albedos)
    assert np.array_equal(a.transfer, b.transfer)


def test_forest_zero_trees_is_ground_only():
    scene = gen_forest(seed=1, size=12.0, n_trees=0)
    assert len(scene) > 0
    assert scene.positions[:, 2].max() <= 0.01


def test_forest_tree_count_and_border_margin():
    scene = gen_forest(seed=1, size=60.0, n_trees=50)
    # trunk splats are the ones with strongly anisotropic vertical scale
    trunk_mask = (scene.scales[:, 2] > 0.4) & (scene.scales[:, 0] < 0.25)
    trunk_xy = scene.positions[trunk_mask][:, :2]
    assert np.all(np.abs(trunk_xy) <= 30.0 - 0.5 + 0.15)  # margin minus lean
    # one trunk column per tree: cluster base positions
    base = trunk_xy[np.isclose(scene.positions[trunk_mask][:, 2],
                               scene.positions[trunk_mask][:, 2].min(), atol=2.0)]
    assert len(np.unique(np.round(trunk_xy, 0), axis=0)) >= 50


def test_extract_point_cloud_matches_centers():
    scene = one_gaussian_scene()
    pts = extract_point_cloud(scene)
    assert pts.shape == (1, 3)
    assert np.allclose(pts[0], scene.positions[0])


def test_extract_point_cloud_opacity_filter():
    g1 = Gaussian(np.zeros(3), np.array([1.0, 0, 0, 0]), np.ones(3) * 0.1,
                  0.1, np.ones(3) * 0.5, np.zeros(9))
    g2 = Gaussian(np.ones(3), np.array([1.0, 0, 0, 0]), np.ones(3) * 0.1,
                  0.9, np.ones(3) * 0.5, np.zeros(9))
    scene = SceneModel.from_gaussians([g1, g2], 2, [[-2, -2, -2], [2, 2, 2]])
    pts = extract_point_cloud(scene, alpha_min=0.5)
    assert pts.shape == (1, 3)
    assert np.allclose(pts[0], [1, 1, 1])


def test_forest_point_count_matches():
    scene = gen_forest(seed=1, size=30.0, n_trees=10)
    assert extract_point_cloud(scene).shape == (len(scene), 3)


def test_shading_normals_flat_and_isotropic():
    quats = np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]])
    scales = np.array([[0.5, 0.5, 0.02], [0.3, 0.3, 0.3]])
    n = shading_normals(quats, scales)
    assert np.allclose(n[0], [0, 0, 1])
    assert np.allclose(n[1], [0, 0, 1])


def test_rotate_scene_z_geometry_and_transfer():
    scene = gen_forest(seed=2, size=16.0, n_trees=3)
    theta = 0.6
    center = np.array([1.0, -2.0, 0.0])
    rotated = rotate_scene_z(scene, theta, center)

    rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                    [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
    expected_pos = (scene.positions - center) @ rot.T + center
    assert np.allclose(rotated.positions, expected_pos, atol=1e-5)

    # quaternion composition matches matrix composition
    assert np.allclose(quat_to_rot(rotated.rotations),
                       np.einsum("ij,njk->nik", rot, quat_to_rot(scene.rotations)),
                       atol=1e-6)

    # normals follow the rotation, and carried transfer evaluates like the
    # original transfer in counter-rotated directions
    assert np.allclose(rotated.normals(), scene.normals() @ rot.T, atol=1e-6)
    rng = np.random.default_rng(0)
    from rnsim.sh import uniform_directions
    dirs = uniform_directions(rng, 16)
    i = 7
    basis = eval_basis(2, dirs)
    basis_back = eval_basis(2, dirs @ rot)  # Rz(-theta) applied to each dir
    assert np.allclose(basis @ rotated.transfer[i].astype(np.float64),
                       basis_back @ scene.transfer[i].astype(np.float64), atol=1e-5)
