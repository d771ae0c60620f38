import numpy as np
import pytest

from _oracles import trilinear
from rnsim.relight import (
    FULL_SPHERE_DC,
    EnvLight,
    OcclusionField,
    Relit,
    build_occlusion_field,
    default_sky_light,
    edit_light,
    grid_for_scene,
    light_from_spec,
    load_field,
    panorama_to_sh,
    probe_visibility,
    project_visibility_sh,
    save_field,
    shade,
    shade_colors,
    synthetic_sky_panorama,
    uniform_light,
)
from rnsim.render import Camera, face_directions, render
from rnsim.scene import Gaussian, SceneModel, gen_forest
from rnsim.sh import ShCoeffs, eval_basis, uniform_directions


def empty_scene():
    """A scene that renders nothing: one fully transparent Gaussian."""
    return SceneModel(
        positions=np.array([[100.0, 100.0, 100.0]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        scales=np.full((1, 3), 0.1), opacities=np.array([0.0]),
        albedos=np.full((1, 3), 0.5), transfer=np.zeros((1, 9)),
        baked=None, degree=2, bounds=[[-200, -200, -200], [200, 200, 200]])


# ---------------------------------------------------------------- visibility

def test_probe_visibility_all_open():
    maps = np.full((6, 8, 8), np.inf)
    assert np.all(probe_visibility(maps, 0.3) == 1.0)


def test_probe_visibility_all_blocked():
    maps = np.full((6, 8, 8), 0.1)
    assert np.all(probe_visibility(maps, 0.5) == 0.0)


def test_probe_visibility_boundary():
    maps = np.full((6, 8, 8), 0.49)
    maps[0, 0, 0] = 0.51
    maps[0, 0, 1] = 0.50
    v = probe_visibility(maps, 0.5)
    assert v[0, 0, 0] == 1.0
    assert v[0, 0, 1] == 1.0  # >= threshold counts as visible
    assert v[0, 0, 2] == 0.0


def test_project_full_sphere():
    vis = np.ones((6, 32, 32))
    b = project_visibility_sh(vis, 2)
    assert b[0] == pytest.approx(FULL_SPHERE_DC, abs=1e-9)
    assert np.all(np.abs(b[1:]) < 0.02)


def test_project_all_occluded_is_zero():
    b = project_visibility_sh(np.zeros((6, 16, 16)), 2)
    assert np.allclose(b, 0.0)


def test_project_hemisphere_against_monte_carlo():
    # lower hemisphere blocked: V(dir) = dir_z >= 0
    res = 32
    vis = np.empty((6, res, res))
    from rnsim.render import FACE_NAMES
    for fi, face in enumerate(FACE_NAMES):
        vis[fi] = (face_directions(res, face)[..., 2] >= 0.0).astype(float)
    b = project_visibility_sh(vis, 2)
    assert b[0] == pytest.approx(np.sqrt(np.pi), rel=0.02)

    rng = np.random.default_rng(0)
    dirs = uniform_directions(rng, 500_000)
    v = (dirs[:, 2] >= 0).astype(float)
    mc = (eval_basis(2, dirs) * v[:, None]).mean(axis=0) * 4.0 * np.pi
    assert np.allclose(b, mc, atol=0.02 * FULL_SPHERE_DC)


# ---------------------------------------------------------------- field build

def test_empty_scene_field_is_full_sphere():
    scene = empty_scene()
    field = build_occlusion_field(scene, origin=(-1, -1, -1), dims=(2, 2, 2),
                                  cell=2.0, face_res=16, workers=1)
    assert np.allclose(field.values[..., 0], FULL_SPHERE_DC, atol=0.01)
    assert np.all(np.abs(field.values[..., 1:]) < 0.02)


def test_field_build_deterministic_and_thread_independent():
    scene = gen_forest(seed=4, size=10.0, n_trees=2)
    kw = dict(origin=(-5, -5, 0), dims=(3, 3, 2), cell=3.0, face_res=16)
    f1 = build_occlusion_field(scene, workers=1, **kw)
    f2 = build_occlusion_field(scene, workers=4, **kw)
    assert np.array_equal(f1.values, f2.values)


def test_forest_field_dark_in_canopy_open_above():
    scene = gen_forest(seed=1, size=20.0, n_trees=8)
    origin, dims = grid_for_scene(scene, cell=1.0, z_range=(0.0, 8.0))
    field = build_occlusion_field(scene, origin, dims, cell=1.0,
                                  face_res=16, workers=4)
    dc = field.values[..., 0]
    # nodes well above the tallest tree see the full sphere
    assert dc[:, :, -1].min() > 0.9 * FULL_SPHERE_DC
    # the darkest node (inside vegetation) loses over half its sky
    assert dc.min() < 0.5 * FULL_SPHERE_DC


def test_field_save_load_round_trip(tmp_path):
    scene = empty_scene()
    field = build_occlusion_field(scene, origin=(0, 0, 0), dims=(2, 3, 2),
                                  cell=1.5, face_res=16, workers=1)
    p = tmp_path / "f.occ"
    save_field(field, p)
    loaded = load_field(p)
    assert np.array_equal(field.values, loaded.values)
    assert loaded.dims == field.dims
    assert loaded.cell == field.cell
    assert loaded.d_thresh == field.d_thresh


def test_field_dc_bound_validated():
    bad = np.zeros((2, 2, 2, 9), dtype=np.float32)
    bad[..., 0] = 5.0  # above 2 sqrt(pi)
    with pytest.raises(ValueError, match="DC"):
        OcclusionField(origin=np.zeros(3), cell=1.0, dims=(2, 2, 2),
                       values=bad, degree=2, d_thresh=0.3, face_res=16)


# ------------------------------------------------------------- interpolation

def random_field(rng, dims=(4, 5, 3), cell=0.8, origin=(-1.0, 0.5, 0.0)):
    values = rng.uniform(0.0, FULL_SPHERE_DC * 0.28, size=dims + (9,)).astype(np.float32)
    return OcclusionField(origin=np.array(origin), cell=cell, dims=dims,
                          values=values, degree=2, d_thresh=0.3, face_res=16)


def test_interpolate_at_node_is_exact():
    rng = np.random.default_rng(1)
    field = random_field(rng)
    pos = field.origin + np.array([2, 3, 1]) * field.cell
    out = field.interpolate(pos[None, :])
    assert np.allclose(out[0], field.values[2, 3, 1], atol=1e-12)


def test_interpolate_uniform_field_is_constant():
    values = np.tile(np.linspace(0.1, 0.9, 9).astype(np.float32), (3, 3, 3, 1))
    field = OcclusionField(origin=np.zeros(3), cell=1.0, dims=(3, 3, 3),
                           values=values, degree=2, d_thresh=0.3, face_res=16)
    out = field.interpolate(np.array([[0.5, 0.5, 0.5], [1.3, 0.2, 1.9]]))
    assert np.allclose(out, values[0, 0, 0], atol=1e-7)


def test_interpolate_matches_trilinear_oracle():
    rng = np.random.default_rng(2)
    field = random_field(rng)
    lo = field.origin
    hi = field.origin + (np.array(field.dims) - 1) * field.cell
    pts = rng.uniform(lo, hi, size=(50, 3))
    got = field.interpolate(pts)  # beta == 1 path
    for p, g in zip(pts, got):
        expected = trilinear(field.values.astype(np.float64), field.origin,
                             field.cell, p)
        assert np.allclose(g, expected, atol=1e-9)


def test_interpolate_convex_combination_envelope():
    rng = np.random.default_rng(3)
    field = random_field(rng)
    lo = field.origin
    hi = field.origin + (np.array(field.dims) - 1) * field.cell
    pts = rng.uniform(lo, hi, size=(30, 3))
    normals = uniform_directions(rng, 30)
    out = field.interpolate(pts, normals)
    for p, o in zip(pts, out):
        rel = np.clip((p - field.origin) / field.cell, 0, np.array(field.dims) - 1)
        i0 = np.minimum(rel.astype(int), np.array(field.dims) - 2)
        block = field.values[i0[0]:i0[0] + 2, i0[1]:i0[1] + 2, i0[2]:i0[2] + 2]
        neighbors = block.reshape(8, 9).astype(np.float64)
        assert np.all(o >= neighbors.min(axis=0) - 1e-9)
        assert np.all(o <= neighbors.max(axis=0) + 1e-9)


def test_backface_mask_drops_probes_behind_surface():
    # two z-layers with distinct values; an upward normal at the midpoint
    # must only see the upper layer
    values = np.zeros((2, 2, 2, 9), dtype=np.float32)
    values[:, :, 0, 0] = 1.0   # lower probes
    values[:, :, 1, 0] = 3.0   # upper probes
    field = OcclusionField(origin=np.zeros(3), cell=1.0, dims=(2, 2, 2),
                           values=values, degree=2, d_thresh=0.3, face_res=16)
    mid = np.array([[0.5, 0.5, 0.25]])
    up = np.array([[0.0, 0.0, 1.0]])
    out = field.interpolate(mid, up)
    assert out[0, 0] == pytest.approx(3.0)
    # probes exactly in the surface plane ((q - p) . n == 0) survive
    on_floor = field.interpolate(np.array([[0.5, 0.5, 0.0]]), -up)
    assert on_floor[0, 0] == pytest.approx(1.0)


def test_all_masked_falls_back_to_unmasked():
    # point below the grid with a downward normal: every probe is behind the
    # surface, so the unmasked trilinear of the clamped point applies
    values = np.zeros((2, 2, 2, 9), dtype=np.float32)
    values[:, :, 0, 0] = 1.0
    values[:, :, 1, 0] = 3.0
    field = OcclusionField(origin=np.zeros(3), cell=1.0, dims=(2, 2, 2),
                           values=values, degree=2, d_thresh=0.3, face_res=16)
    out = field.interpolate(np.array([[0.5, 0.5, -0.5]]),
                            np.array([[0.0, 0.0, -1.0]]))
    assert out[0, 0] == pytest.approx(1.0)


# ------------------------------------------------------------------- shading

def unit_gaussian(albedo=(1.0, 1.0, 1.0), transfer_dc=1.0):
    t = np.zeros(9)
    t[0] = transfer_dc
    return Gaussian(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.1),
                    1.0, np.asarray(albedo, dtype=np.float64), t)


def test_shade_single_term_product():
    g = unit_gaussian()
    light = EnvLight(ShCoeffs.dc(2, [1.0, 1.0, 1.0]))
    occ = ShCoeffs.dc(2, [1.0])
    assert np.allclose(shade(g, light, occ), [1.0, 1.0, 1.0])


def test_shade_zero_albedo():
    g = unit_gaussian(albedo=(0.0, 0.0, 0.0))
    rng = np.random.default_rng(5)
    light = EnvLight(ShCoeffs(2, rng.normal(size=(3, 9))))
    occ = ShCoeffs(2, rng.normal(size=(1, 9)))
    assert np.allclose(shade(g, light, occ), 0.0)


def test_shade_linearity_in_light():
    rng = np.random.default_rng(6)
    scene = gen_forest(seed=2, size=10.0, n_trees=2)
    occ = rng.uniform(0, 1, size=(len(scene), 9))
    l1 = rng.uniform(0, 1, size=(3, 9))
    l2 = rng.uniform(0, 1, size=(3, 9))
    a, b = 0.6, 1.7
    mix = EnvLight(ShCoeffs(2, a * l1 + b * l2))
    c_mix = shade_colors(scene, mix, occ)
    c1 = shade_colors(scene, EnvLight(ShCoeffs(2, l1)), occ)
    c2 = shade_colors(scene, EnvLight(ShCoeffs(2, l2)), occ)
    # all-positive lights and occlusion keep the pre-clamp values positive
    assert np.allclose(c_mix, a * c1 + b * c2, atol=1e-12)


def test_shade_degree_mismatch():
    g = unit_gaussian()
    light = EnvLight(ShCoeffs.dc(1, [1.0, 1.0, 1.0]))
    with pytest.raises(ValueError, match="mismatch"):
        shade(g, light, ShCoeffs.dc(2, [1.0]))


def test_full_visibility_unit_transfer_recovers_albedo():
    # open-air probes + unit-DC transfer + the uniform unit light: shading
    # returns exactly the albedo
    from rnsim.scene import ForestParams

    scene = gen_forest(seed=3, size=10.0, n_trees=0,
                       params=ForestParams(transfer_mode="unit-dc"))
    occ = np.zeros((len(scene), 9))
    occ[:, 0] = FULL_SPHERE_DC
    colors = shade_colors(scene, uniform_light(2, 1.0), occ)
    assert np.allclose(colors, scene.albedos, atol=1e-6)


# ---------------------------------------------------------------- light edits

def test_edit_light_identity():
    light = default_sky_light(2)
    same = edit_light(light, 0.0, 1.0, (1.0, 1.0, 1.0))
    assert np.allclose(same.sh.values, light.sh.values, atol=1e-12)


def test_edit_light_dc_only_rotation_invariant():
    light = EnvLight(ShCoeffs.dc(2, [0.3, 0.5, 0.7]))
    rotated = edit_light(light, 2.1)
    assert np.allclose(rotated.sh.values, light.sh.values, atol=1e-12)


def test_edit_light_rejects_negative():
    light = default_sky_light(2)
    with pytest.raises(ValueError):
        edit_light(light, 0.0, -0.5)
    with pytest.raises(ValueError):
        edit_light(light, 0.0, 1.0, (-1.0, 1.0, 1.0))


def test_intensity_half_halves_rendered_pixels():
    scene = gen_forest(seed=5, size=12.0, n_trees=3)
    origin, dims = grid_for_scene(scene, cell=2.0, z_range=(0.0, 6.0))
    field = build_occlusion_field(scene, origin, dims, cell=2.0,
                                  face_res=16, workers=4)
    light = default_sky_light(2)
    cam = Camera.from_yaw(np.array([-5.5, 0.0, 1.5]), 0.0, 48, 32)
    full = render(scene, cam, Relit(light, field))
    half = render(scene, cam, Relit(edit_light(light, 0.0, 0.5), field))
    assert np.allclose(half.rgb, 0.5 * full.rgb, atol=1e-6)
    assert np.array_equal(half.alpha, full.alpha)


def test_relit_render_linear_in_light():
    scene = gen_forest(seed=5, size=12.0, n_trees=2)
    origin, dims = grid_for_scene(scene, cell=2.0, z_range=(0.0, 6.0))
    field = build_occlusion_field(scene, origin, dims, cell=2.0,
                                  face_res=16, workers=4)
    light = default_sky_light(2)
    cam = Camera.from_yaw(np.array([-5.5, 0.0, 1.5]), 0.3, 48, 32)
    one = render(scene, cam, Relit(light, field))
    three = render(scene, cam, Relit(edit_light(light, 0.0, 3.0), field))
    assert np.allclose(three.rgb, 3.0 * one.rgb, atol=1e-6)


# ------------------------------------------------------------------ panorama

def test_panorama_constant_projection():
    img = np.ones((32, 64, 3))
    light = panorama_to_sh(img, 2)
    assert np.allclose(light.sh.values[:, 0], FULL_SPHERE_DC, atol=1e-9)
    assert np.all(np.abs(light.sh.values[:, 1:]) < 0.01)


def test_panorama_zero_is_zero():
    light = panorama_to_sh(np.zeros((16, 32)), 2)
    assert np.allclose(light.sh.values, 0.0)


def test_panorama_top_half_hemisphere():
    img = np.zeros((64, 128))
    img[:32] = 1.0
    light = panorama_to_sh(img, 2)
    assert light.sh.values[0, 0] == pytest.approx(np.sqrt(np.pi), rel=0.02)


def test_panorama_input_validation():
    with pytest.raises(ValueError, match="width"):
        panorama_to_sh(np.ones((16, 24)), 2)
    bad = np.ones((16, 32))
    bad[0, 0] = -1.0
    with pytest.raises(ValueError, match=">= 0"):
        panorama_to_sh(bad, 2)


def test_light_from_spec_preset_and_edits(tmp_path):
    base = light_from_spec({}, 2)
    assert np.allclose(base.sh.values, default_sky_light(2).sh.values)
    dusk = light_from_spec({"preset": "dusk"}, 2)
    assert not np.allclose(dusk.sh.values, base.sh.values)
    from rnsim.formats import write_pfm
    pano = synthetic_sky_panorama(16)
    p = tmp_path / "sky.pfm"
    write_pfm(p, pano)
    lit = light_from_spec({"panorama": str(p)}, 2)
    direct = panorama_to_sh(np.asarray(pano, dtype=np.float32).astype(np.float64), 2)
    assert np.allclose(lit.sh.values, direct.sh.values, atol=1e-4)
