import numpy as np
import pytest

from rnsim.relight import build_occlusion_field, grid_for_scene
from rnsim.scene import SceneModel, gen_forest


@pytest.fixture(scope="session")
def forest_scene():
    return gen_forest(seed=11, size=36.0, n_trees=5)


@pytest.fixture(scope="session")
def forest_field(forest_scene):
    origin, dims = grid_for_scene(forest_scene, cell=3.0, z_range=(0.0, 6.0))
    return build_occlusion_field(forest_scene, origin, dims, cell=3.0,
                                 face_res=16, workers=8)


@pytest.fixture(scope="session")
def open_scene():
    """36x36 m ground-only scene (no obstacles above the ground sheet)."""
    return gen_forest(seed=12, size=36.0, n_trees=0)


@pytest.fixture(scope="session")
def open_field(open_scene):
    origin, dims = grid_for_scene(open_scene, cell=4.0, z_range=(0.0, 5.0))
    return build_occlusion_field(open_scene, origin, dims, cell=4.0,
                                 face_res=16, workers=8)


def make_gap_wall_scene():
    """A wall across the scene with one 4 m gap: space stays connected but
    most straight crossings collide."""
    xs = np.concatenate([np.arange(-18.0, -2.0, 0.25), np.arange(2.0, 18.01, 0.25)])
    zs = np.arange(0.25, 4.51, 0.25)
    pts = np.array([[x, 0.0, z] for x in xs for z in zs])
    ground = gen_forest(seed=13, size=36.0, n_trees=0)
    n = len(pts)
    positions = np.concatenate([ground.positions.astype(np.float64), pts])
    rotations = np.concatenate([ground.rotations.astype(np.float64),
                                np.tile([1.0, 0, 0, 0], (n, 1))])
    scales = np.concatenate([ground.scales.astype(np.float64),
                             np.tile([0.12, 0.12, 0.12], (n, 1))])
    opac = np.concatenate([ground.opacities.astype(np.float64), np.full(n, 1.0)])
    albedos = np.concatenate([ground.albedos.astype(np.float64),
                              np.tile([0.5, 0.45, 0.4], (n, 1))])
    transfer = np.concatenate([ground.transfer.astype(np.float64), np.zeros((n, 9))])
    transfer[len(ground):, 0] = 0.8
    return SceneModel(
        positions=positions, rotations=rotations, scales=scales,
        opacities=opac, albedos=albedos, transfer=transfer, baked=None,
        degree=2, bounds=[[-18, -18, -0.1], [18, 18, 6.0]], ground_z=0.0)


@pytest.fixture(scope="session")
def wall_scene():
    return make_gap_wall_scene()


@pytest.fixture(scope="session")
def wall_field(wall_scene):
    origin, dims = grid_for_scene(wall_scene, cell=4.0, z_range=(0.0, 5.0))
    return build_occlusion_field(wall_scene, origin, dims, cell=4.0,
                                 face_res=16, workers=8)
