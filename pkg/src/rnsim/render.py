"""CPU splat rasterizer: EWA-style projection of 3D Gaussians, global depth
sort, front-to-back alpha compositing of color and depth, for perspective
agent cameras and the six 90-degree probe faces used by the occlusion field.

The inner compositing loop is a numba kernel; everything feeding it is plain
numpy. Results are independent of input Gaussian order (global sort with a
stable index tie-break) and of any internal scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .formats import linear_to_rgb8
from .scene import Gaussian, SceneModel, quat_to_rot
from .sh import Y00, eval_basis

# transmittance below which a pixel stops accepting contributions
T_MIN = 1e-4
# footprint cutoff: include pixels with squared Mahalanobis distance <= 9 (3 sigma)
CUTOFF_SQ = 9.0
# low-pass floor on projected 2D covariance eigenvalues, px^2
EIGEN_FLOOR = 0.3

FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. rotation is camera-to-world with columns
    (right, down, forward); pixel (x, y) has its center at (x+0.5, y+0.5)."""

    rotation: np.ndarray   # (3, 3)
    position: np.ndarray   # (3,) m
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 1000.0
    kind: str = "perspective"   # "perspective" | "probe-face"

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("need near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be >= 1x1")

    @classmethod
    def from_yaw(cls, position, yaw: float, width: int, height: int,
                 hfov_deg: float = 90.0, euler_offset=None, near: float = 0.05,
                 far: float = 500.0) -> "Camera":
        """Level camera at `position` looking along world yaw. euler_offset
        (rad, applied in the camera frame around right/down/forward axes)
        models mount calibration error."""
        f = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        r = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        d = np.array([0.0, 0.0, -1.0])
        rot = np.column_stack([r, d, f])
        if euler_offset is not None:
            rot = rot @ _euler_rot(*euler_offset)
        fx = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(rotation=rot, position=np.asarray(position, dtype=np.float64),
                   fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, near=near, far=far)


def _euler_rot(ax: float, ay: float, az: float) -> np.ndarray:
    """Small-offset rotation Rx(ax) @ Ry(ay) @ Rz(az) in the camera frame."""
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


_FACE_AXES = {
    "+x": (np.array([1.0, 0, 0]), np.array([0.0, -1, 0]), np.array([0.0, 0, -1])),
    "-x": (np.array([-1.0, 0, 0]), np.array([0.0, 1, 0]), np.array([0.0, 0, -1])),
    "+y": (np.array([0.0, 1, 0]), np.array([1.0, 0, 0]), np.array([0.0, 0, -1])),
    "-y": (np.array([0.0, -1, 0]), np.array([-1.0, 0, 0]), np.array([0.0, 0, -1])),
    "+z": (np.array([0.0, 0, 1]), np.array([0.0, 1, 0]), np.array([-1.0, 0, 0])),
    "-z": (np.array([0.0, 0, -1]), np.array([0.0, -1, 0]), np.array([-1.0, 0, 0])),
}


def probe_face_camera(center, face: str, resolution: int) -> Camera:
    """90-degree-FOV face camera of the probe cube map at `center`."""
    forward, right, down = _FACE_AXES[face]
    return Camera(
        rotation=np.column_stack([right, down, forward]),
        position=np.asarray(center, dtype=np.float64),
        fx=resolution / 2.0, fy=resolution / 2.0,
        cx=resolution / 2.0, cy=resolution / 2.0,
        width=resolution, height=resolution,
        near=0.01, far=10000.0, kind="probe-face")


def face_directions(resolution: int, face: str) -> np.ndarray:
    """(res, res, 3) unit world directions through each face pixel center."""
    forward, right, down = _FACE_AXES[face]
    t = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u, v = np.meshgrid(t, t, indexing="xy")
    dirs = (forward[None, None, :] + u[..., None] * right[None, None, :]
            + v[..., None] * down[None, None, :])
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def face_solid_angles(resolution: int) -> np.ndarray:
    """(res, res) exact per-pixel solid angles of one cube face; the sum over
    six faces is exactly 4 pi."""
    edges = np.arange(resolution + 1) / resolution * 2.0 - 1.0

    def area(u, v):
        return np.arctan2(u * v, np.sqrt(u * u + v * v + 1.0))

    uu, vv = np.meshgrid(edges, edges, indexing="xy")
    a = area(uu, vv)
    return a[1:, 1:] - a[:-1, 1:] - a[1:, :-1] + a[:-1, :-1]


@dataclass
class FrameBuffer:
    """Linear-radiance render target. rgb is pre-clamp linear; clamping and
    gamma happen only at the 8-bit export boundary (to_rgb8)."""

    rgb: np.ndarray     # (H, W, 3) float64, linear
    depth: np.ndarray   # (H, W) float64, m; +inf where nothing was hit
    alpha: np.ndarray   # (H, W) float64 accumulated opacity in [0, 1]

    def to_rgb8(self) -> np.ndarray:
        return linear_to_rgb8(self.rgb)


class Baked:
    """Shading mode: evaluate each Gaussian's baked radiance SH toward the
    camera (the static captured-appearance path)."""

    def gaussian_colors(self, scene: SceneModel, camera: Camera) -> np.ndarray:
        if scene.baked is None:
            raise ValueError("scene has no baked radiance; render relit instead")
        dirs = scene.positions.astype(np.float64) - camera.position[None, :]
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        dirs = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 0)
        dirs[norms[:, 0] == 0] = (0.0, 0.0, 1.0)
        basis = eval_basis(scene.degree, dirs)
        colors = np.einsum("nk,nck->nc", basis, scene.baked.astype(np.float64))
        return np.maximum(colors, 0.0)

    def default_background(self):
        return ("const", np.array([0.5, 0.5, 0.5]))


def _background_image(camera: Camera, spec) -> np.ndarray:
    """Resolve a background spec to an (H, W, 3) linear image.

    Specs: ("const", rgb) or ("sky", base_rgb); "sky" is a vertical gradient
    of the base color along each pixel ray's world up-component."""
    kind, rgb = spec
    h, w = camera.height, camera.width
    base = np.asarray(rgb, dtype=np.float64)
    if kind == "const":
        return np.broadcast_to(base, (h, w, 3)).copy()
    if kind == "sky":
        xs = (np.arange(w) + 0.5 - camera.cx) / camera.fx
        ys = (np.arange(h) + 0.5 - camera.cy) / camera.fy
        u, v = np.meshgrid(xs, ys, indexing="xy")
        d = np.stack([u, v, np.ones_like(u)], axis=-1)
        d_world = d @ camera.rotation.T
        up = d_world[..., 2] / np.linalg.norm(d_world, axis=-1)
        return base[None, None, :] * (1.0 + 0.4 * up)[..., None]
    raise ValueError(f"unknown background kind {kind!r}")


def resolve_background(background, shading):
    if background is None:
        return shading.default_background()
    if isinstance(background, str):
        if background == "gray":
            return ("const", np.array([0.5, 0.5, 0.5]))
        if background == "black":
            return ("const", np.zeros(3))
        if background == "sky":
            return shading.default_background() if not isinstance(shading, Baked) \
                else ("const", np.array([0.5, 0.5, 0.5]))
        raise ValueError(f"unknown background {background!r}")
    if isinstance(background, tuple) and len(background) == 2:
        return background
    return ("const", np.asarray(background, dtype=np.float64))


def project_scene(scene: SceneModel, camera: Camera):
    """Project all Gaussians; returns (valid_idx, means2d, inv_cov, radius, z).

    inv_cov packs the inverse 2D covariance as (a, b, c) with the footprint
    weight exp(-0.5 (a dx^2 + 2 b dx dy + c dy^2)); eigenvalues of the 2D
    covariance are floored at EIGEN_FLOOR px^2 before inversion.

    A Gaussian yields no footprint when behind the near plane, beyond the
    far plane, or more than its 3-sigma world extent outside the view
    frustum; the projective Jacobian is evaluated at frustum-clamped
    coordinates so grazing splats cannot smear across the image.
    """
    pos = scene.positions.astype(np.float64)
    rel = pos - camera.position[None, :]
    xc = rel @ camera.rotation  # components along (right, down, forward)
    z = xc[:, 2]
    u = np.zeros_like(z)
    v = np.zeros_like(z)
    in_front = z > 0
    u[in_front] = xc[in_front, 0] / z[in_front]
    v[in_front] = xc[in_front, 1] / z[in_front]
    mx = camera.fx * u + camera.cx
    my = camera.fy * v + camera.cy

    # conservative frustum cull: center further than 3 sigma_max (plus the
    # eigenvalue-floor guard) outside any frustum plane cannot contribute
    tan_l, tan_r = camera.cx / camera.fx, (camera.width - camera.cx) / camera.fx
    tan_t, tan_b = camera.cy / camera.fy, (camera.height - camera.cy) / camera.fy
    s_max = scene.scales.astype(np.float64).max(axis=1)
    margin = 3.0 * s_max + z * (3.0 * np.sqrt(EIGEN_FLOOR)) / min(camera.fx, camera.fy)
    in_frustum = ((xc[:, 0] <= tan_r * z + margin) & (-xc[:, 0] <= tan_l * z + margin)
                  & (xc[:, 1] <= tan_b * z + margin) & (-xc[:, 1] <= tan_t * z + margin))

    u_j = np.clip(u, -1.3 * tan_l, 1.3 * tan_r)
    v_j = np.clip(v, -1.3 * tan_t, 1.3 * tan_b)

    cov = _scene_covariances(scene)
    r_cols = camera.rotation  # columns right, down, forward
    right, down, forward = r_cols[:, 0], r_cols[:, 1], r_cols[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = (camera.fx / z)[:, None] * (right[None, :] - u_j[:, None] * forward[None, :])
        m1 = (camera.fy / z)[:, None] * (down[None, :] - v_j[:, None] * forward[None, :])
        a = np.einsum("ni,nij,nj->n", m0, cov, m0)
        b = np.einsum("ni,nij,nj->n", m0, cov, m1)
        c = np.einsum("ni,nij,nj->n", m1, cov, m1)

        # eigenvalue floor on [[a, b], [b, c]]
        t = 0.5 * (a + c)
        d = np.sqrt(np.maximum(0.0, (0.5 * (a - c)) ** 2 + b * b))
        lam1 = np.maximum(t + d, EIGEN_FLOOR)
        lam2 = np.maximum(t - d, EIGEN_FLOOR)
        use_b = np.abs(b) > 1e-12
        v1x = np.where(use_b, b, np.where(a >= c, 1.0, 0.0))
        v1y = np.where(use_b, lam1 - a, np.where(a >= c, 0.0, 1.0))
        nrm = np.hypot(v1x, v1y)
        nrm = np.where(nrm == 0, 1.0, nrm)
        v1x, v1y = v1x / nrm, v1y / nrm
        a2 = lam1 * v1x * v1x + lam2 * v1y * v1y
        b2 = (lam1 - lam2) * v1x * v1y
        c2 = lam1 * v1y * v1y + lam2 * v1x * v1x

        det = a2 * c2 - b2 * b2
        inv_a = c2 / det
        inv_b = -b2 / det
        inv_c = a2 / det
        radius = 3.0 * np.sqrt(lam1)

    on_screen = (mx + radius > 0) & (mx - radius < camera.width) & \
                (my + radius > 0) & (my - radius < camera.height)
    valid = in_front & (z > camera.near) & (z <= camera.far) & in_frustum & on_screen
    idx = np.flatnonzero(valid)
    means2d = np.stack([mx, my], axis=1)
    inv_cov = np.stack([inv_a, inv_b, inv_c], axis=1)
    return idx, means2d, inv_cov, radius, z


def _scene_covariances(scene: SceneModel) -> np.ndarray:
    cached = getattr(scene, "_cov_cache", None)
    if cached is None:
        cached = scene.covariances()
        cached.setflags(write=False)
        scene._cov_cache = cached
    return cached


def project_gaussian(g: Gaussian, camera: Camera):
    """Screen-space footprint of one Gaussian: (mean2d, cov2d, depth) or None
    when it is behind the near plane or entirely off-screen."""
    scene = SceneModel(
        positions=g.position[None, :], rotations=g.rotation[None, :],
        scales=g.scale[None, :], opacities=np.array([g.opacity]),
        albedos=np.clip(g.albedo, 0, 1)[None, :], transfer=g.transfer[None, :],
        baked=None, degree=int(np.sqrt(len(g.transfer))) - 1,
        bounds=np.stack([g.position - 1, g.position + 1]))
    idx, means2d, inv_cov, radius, z = project_scene(scene, camera)
    if len(idx) == 0:
        return None
    ia, ib, ic = inv_cov[0]
    det = ia * ic - ib * ib
    cov2d = np.array([[ic, -ib], [-ib, ia]]) / det
    return means2d[0], cov2d, float(z[0])


@njit(cache=True, nogil=True)
def _composite_kernel(order, means2d, inv_cov, radius, opac, colors, zs,
                      rgb, depth_num, alpha):
    h, w = alpha.shape
    for k in range(order.shape[0]):
        i = order[k]
        mx = means2d[i, 0]
        my = means2d[i, 1]
        r = radius[i]
        x0 = int(np.floor(mx - r))
        x1 = int(np.ceil(mx + r))
        y0 = int(np.floor(my - r))
        y1 = int(np.ceil(my + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > w - 1:
            x1 = w - 1
        if y1 > h - 1:
            y1 = h - 1
        ia = inv_cov[i, 0]
        ib = inv_cov[i, 1]
        ic = inv_cov[i, 2]
        op = opac[i]
        z = zs[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                t = 1.0 - alpha[y, x]
                if t < T_MIN:
                    continue
                dx = x + 0.5 - mx
                dy = y + 0.5 - my
                q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if q > CUTOFF_SQ:
                    continue
                a_i = op * np.exp(-0.5 * q)
                if a_i <= 0.0:
                    continue
                wgt = a_i * t
                rgb[y, x, 0] += wgt * c0
                rgb[y, x, 1] += wgt * c1
                rgb[y, x, 2] += wgt * c2
                depth_num[y, x] += wgt * z
                alpha[y, x] += wgt


def render(scene: SceneModel, camera: Camera, shading, background=None) -> FrameBuffer:
    """Rasterize the scene: per pixel, front-to-back alpha compositing of the
    per-Gaussian colors produced by `shading`, plus an alpha-weighted mean
    depth. Remaining transmittance is filled with the background."""
    h, w = camera.height, camera.width
    rgb = np.zeros((h, w, 3))
    depth_num = np.zeros((h, w))
    alpha = np.zeros((h, w))

    idx, means2d, inv_cov, radius, z = project_scene(scene, camera)
    if len(idx) > 0:
        colors = shading.gaussian_colors(scene, camera)
        order = idx[np.argsort(z[idx], kind="stable")]
        _composite_kernel(order, means2d, inv_cov, radius,
                          scene.opacities.astype(np.float64),
                          np.ascontiguousarray(colors, dtype=np.float64),
                          z, rgb, depth_num, alpha)

    bg = _background_image(camera, resolve_background(background, shading))
    rgb += (1.0 - alpha)[..., None] * bg
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(alpha > 0.0, depth_num / alpha, np.inf)
    return FrameBuffer(rgb=rgb, depth=depth, alpha=alpha)


class _DepthOnly:
    """Shading stub for probe passes; colors are irrelevant."""

    def gaussian_colors(self, scene, camera):
        return np.zeros((len(scene), 3))

    def default_background(self):
        return ("const", np.zeros(3))


def render_probe_faces(scene: SceneModel, center, resolution: int) -> np.ndarray:
    """Six per-face depth maps (distance along each pixel ray, m) around
    `center`, ordered per FACE_NAMES. Empty pixels are +inf."""
    if resolution < 8:
        raise ValueError("probe face resolution must be >= 8")
    maps = np.empty((6, resolution, resolution))
    shading = _DepthOnly()
    for fi, face in enumerate(FACE_NAMES):
        cam = probe_face_camera(center, face, resolution)
        fb = render(scene, cam, shading, background="black")
        xs = (np.arange(resolution) + 0.5 - cam.cx) / cam.fx
        ys = (np.arange(resolution) + 0.5 - cam.cy) / cam.fy
        u, v = np.meshgrid(xs, ys, indexing="xy")
        secant = np.sqrt(u * u + v * v + 1.0)
        maps[fi] = fb.depth * secant
    return maps
