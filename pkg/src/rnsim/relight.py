"""Relightable shading: global SH environment light with physically grounded
edits (rotate / scale / tint), the precomputed occlusion probe field built
from per-probe cube depth maps, trilinear+back-face interpolation to
Gaussian centers, and equirectangular panorama -> SH projection.

The shaded color of Gaussian i is

    c_i = albedo_i * sum_m  L_env[m] * O_i[m] * d_i[m]

summed over all (degree+1)^2 coefficients per color channel: a global light
vector modulated per Gaussian by sky visibility (O) and local transfer (d).
"""

from __future__ import annotations

import json
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .formats import read_pfm
from .render import face_directions, face_solid_angles, render_probe_faces
from .scene import SceneModel
from .sh import ShCoeffs, Y00, eval_basis, n_coeffs, rotate_z
from .sh import rotate_z_values

FULL_SPHERE_DC = 4.0 * np.pi * Y00  # 2 sqrt(pi): DC of the all-visible probe

FIELD_FORMAT_NAME = "rnsim-occlusion-field"
FIELD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EnvLight:
    """Global environment illumination as 3-channel SH coefficients."""

    sh: ShCoeffs
    name: str = ""

    def __post_init__(self):
        if self.sh.channels != 3:
            raise ValueError("environment light needs 3 channels")

    @property
    def degree(self) -> int:
        return self.sh.degree

    def mean_radiance(self) -> np.ndarray:
        """Average radiance over the sphere per channel (clamped at 0)."""
        return np.maximum(self.sh.values[:, 0] * Y00, 0.0)


def uniform_light(degree: int, value: float = 1.0, name: str = "uniform") -> EnvLight:
    """Isotropic light whose full-sphere shading of a unit-DC transfer
    Gaussian returns exactly `value` * albedo."""
    dc = value / FULL_SPHERE_DC
    return EnvLight(ShCoeffs.dc(degree, [dc, dc, dc]), name=name)


def edit_light(light: EnvLight, rotation: float = 0.0, intensity: float = 1.0,
               tint=(1.0, 1.0, 1.0)) -> EnvLight:
    """Rotate about vertical, scale, then tint per channel (in that order)."""
    tint = np.asarray(tint, dtype=np.float64)
    if intensity < 0:
        raise ValueError("intensity must be >= 0")
    if np.any(tint < 0):
        raise ValueError("tint must be >= 0")
    rotated = rotate_z(light.sh, rotation)
    values = rotated.values * intensity * tint[:, None]
    return EnvLight(ShCoeffs(light.degree, values),
                    name=f"{light.name}*edit({rotation:.3f},{intensity:g})")


def panorama_to_sh(image: np.ndarray, degree: int, name: str = "panorama") -> EnvLight:
    """Project an equirectangular radiance panorama onto SH.

    image: (H, 2H) or (H, 2H, 3) float array, non-negative. Row 0 is the
    zenith (+z), azimuth runs from +x toward +y across columns. Quadrature is
    the sin(theta)-weighted midpoint rule, so a constant panorama of 1.0
    projects to DC = 2 sqrt(pi) like the continuous integral.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None].repeat(3, axis=-1)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    if w != 2 * h:
        raise ValueError(f"equirectangular panorama needs width = 2 x height, got {w}x{h}")
    if not np.all(np.isfinite(img)) or np.any(img < 0):
        raise ValueError("panorama values must be finite and >= 0")

    theta = (np.arange(h) + 0.5) / h * np.pi
    phi = (np.arange(w) + 0.5) / w * 2.0 * np.pi
    st, ct = np.sin(theta), np.cos(theta)
    dirs = np.empty((h, w, 3))
    dirs[..., 0] = st[:, None] * np.cos(phi)[None, :]
    dirs[..., 1] = st[:, None] * np.sin(phi)[None, :]
    dirs[..., 2] = ct[:, None]
    # exact solid angle of each row band (integral of sin over the band),
    # split evenly over columns: sums to exactly 4 pi
    edges = np.arange(h + 1) / h * np.pi
    band = np.cos(edges[:-1]) - np.cos(edges[1:])
    weights = np.repeat(band[:, None], w, axis=1) * (2.0 * np.pi / w)

    basis = eval_basis(degree, dirs.reshape(-1, 3))
    wi = (img.reshape(-1, 3) * weights.reshape(-1, 1))
    coeffs = wi.T @ basis  # (3, k)
    return EnvLight(ShCoeffs(degree, coeffs), name=name)


def synthetic_sky_panorama(height: int = 64, sun_azimuth: float = 0.9,
                           sun_elevation: float = 0.9) -> np.ndarray:
    """Small procedural HDR sky: blue gradient, warm sun lobe, dim ground."""
    h, w = height, 2 * height
    theta = (np.arange(h) + 0.5) / h * np.pi
    phi = (np.arange(w) + 0.5) / w * 2.0 * np.pi
    st, ct = np.sin(theta), np.cos(theta)
    z = ct[:, None] * np.ones((1, w))
    img = np.empty((h, w, 3))
    sky = np.clip(z, 0.0, 1.0)
    img[..., 0] = 0.30 + 0.25 * sky
    img[..., 1] = 0.38 + 0.32 * sky
    img[..., 2] = 0.52 + 0.45 * sky
    ground = z < 0.0
    img[ground] = np.array([0.16, 0.14, 0.10])
    sun = np.array([np.cos(sun_azimuth) * np.cos(sun_elevation),
                    np.sin(sun_azimuth) * np.cos(sun_elevation),
                    np.sin(sun_elevation)])
    dirs = np.stack([st[:, None] * np.cos(phi)[None, :],
                     st[:, None] * np.sin(phi)[None, :], z], axis=-1)
    cos_sun = dirs @ sun
    lobe = np.exp((cos_sun - 1.0) * 24.0)
    img += lobe[..., None] * np.array([7.0, 6.2, 4.8])
    return img


def default_sky_light(degree: int = 2) -> EnvLight:
    """The scene's stock daylight: a procedural sunny sky projected to SH."""
    return panorama_to_sh(synthetic_sky_panorama(), degree, name="default-sky")


# --------------------------------------------------------------------------
# occlusion probe field
# --------------------------------------------------------------------------

def probe_visibility(depth_maps: np.ndarray, d_thresh: float) -> np.ndarray:
    """Binary visibility from per-face depth maps: 0 where depth < d_thresh
    (occluded by nearby geometry), 1 where depth >= d_thresh (+inf counts
    as visible)."""
    maps = np.asarray(depth_maps)
    if maps.ndim != 3 or maps.shape[0] != 6 or maps.shape[1] != maps.shape[2]:
        raise ValueError(f"expected (6, res, res) depth maps, got {maps.shape}")
    return (maps >= d_thresh).astype(np.float64)


_FACE_GEOM_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _face_geometry(resolution: int, degree: int):
    """Cached (basis, solid_angle) for SH projection over the 6 cube faces:
    basis is (6*res*res, (degree+1)^2), solid_angle (6*res*res,)."""
    key = (resolution, degree)
    cached = _FACE_GEOM_CACHE.get(key)
    if cached is None:
        from .render import FACE_NAMES

        omega = face_solid_angles(resolution).reshape(-1)
        bases, omegas = [], []
        for face in FACE_NAMES:
            dirs = face_directions(resolution, face).reshape(-1, 3)
            bases.append(eval_basis(degree, dirs))
            omegas.append(omega)
        cached = (np.concatenate(bases, axis=0), np.concatenate(omegas))
        _FACE_GEOM_CACHE[key] = cached
    return cached


def project_visibility_sh(vis_maps: np.ndarray, degree: int) -> np.ndarray:
    """SH coefficients of a probe's visibility function: sum over all cube
    pixels of V(x) Y_lm(dir_x) dOmega_x, with exact per-pixel solid angles."""
    res = vis_maps.shape[1]
    basis, omega = _face_geometry(res, degree)
    v = np.asarray(vis_maps, dtype=np.float64).reshape(-1)
    return (v * omega) @ basis


@dataclass
class OcclusionField:
    """Voxel grid of per-probe visibility SH coefficients."""

    origin: np.ndarray        # (3,) position of node (0,0,0), m
    cell: float               # m
    dims: tuple[int, int, int]
    values: np.ndarray        # (nx, ny, nz, (degree+1)^2) float32
    degree: int
    d_thresh: float
    face_res: int
    _caches: dict = dc_field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 2:
            raise ValueError("occlusion grid needs >= 2 nodes per axis")
        if self.values.shape != (nx, ny, nz, n_coeffs(self.degree)):
            raise ValueError(
                f"field values shape {self.values.shape} != "
                f"{(nx, ny, nz, n_coeffs(self.degree))}")
        dc = self.values[..., 0]
        if dc.min() < -1e-6 or dc.max() > FULL_SPHERE_DC + 1e-6:
            raise ValueError("probe DC outside [0, 2 sqrt(pi)]")
        self.values.setflags(write=False)

    def node_positions(self) -> np.ndarray:
        nx, ny, nz = self.dims
        grid = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                    indexing="ij"), axis=-1)
        return self.origin + grid * self.cell

    def interpolate(self, positions: np.ndarray, normals: np.ndarray | None = None) -> np.ndarray:
        """Occlusion coefficients at arbitrary points: trilinear over the 8
        surrounding probes, each probe masked out when it lies behind the
        local surface ((q_k - p) . n < 0); weights renormalize over the
        survivors, and a fully masked stencil falls back to plain trilinear.
        Points outside the grid are clamped onto it. Returns (N, k)."""
        pts = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = len(pts)
        nx, ny, nz = self.dims
        k = self.values.shape[-1]
        rel = (pts - self.origin) / self.cell
        rel = np.clip(rel, 0.0, np.array([nx, ny, nz], dtype=np.float64) - 1.0)
        i0 = np.minimum(rel.astype(np.int64), np.array([nx, ny, nz]) - 2)
        frac = rel - i0

        corners = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
        idx = i0[:, None, :] + corners[None, :, :]          # (n, 8, 3)
        w = np.ones((n, 8))
        for axis in range(3):
            f = frac[:, axis][:, None]
            w *= np.where(corners[None, :, axis] == 1, f, 1.0 - f)

        if normals is not None:
            nrm = np.atleast_2d(np.asarray(normals, dtype=np.float64))
            node_pos = self.origin + idx * self.cell        # (n, 8, 3)
            behind = np.einsum("nij,nj->ni", node_pos - pts[:, None, :], nrm) < 0.0
            masked = np.where(behind, 0.0, w)
            total = masked.sum(axis=1)
            unmasked_total = w.sum(axis=1)
            use_mask = total > 1e-12
            w = np.where(use_mask[:, None], masked, w)
            denom = np.where(use_mask, total, unmasked_total)
        else:
            denom = w.sum(axis=1)

        vals = self.values[idx[..., 0], idx[..., 1], idx[..., 2]].astype(np.float64)
        out = np.einsum("ni,nik->nk", w, vals) / denom[:, None]
        return out

    def occlusion_for(self, scene: SceneModel) -> np.ndarray:
        """Per-Gaussian occlusion coefficients, cached per scene object."""
        key = id(scene)
        cached = self._caches.get(key)
        if cached is not None:
            ref, value = cached
            if ref() is scene:
                return value
        value = self.interpolate(scene.positions.astype(np.float64), scene.normals())
        value.setflags(write=False)
        self._caches[key] = (weakref.ref(scene), value)
        return value


def grid_for_scene(scene: SceneModel, cell: float = 1.0,
                   z_range: tuple[float, float] | None = None,
                   margin: float = 0.5):
    """Grid spec (origin, dims) covering the scene footprint at `cell` m."""
    lo = scene.bounds[0].astype(np.float64) - margin
    hi = scene.bounds[1].astype(np.float64) + margin
    if z_range is not None:
        lo[2], hi[2] = z_range
    dims = tuple(max(2, int(np.ceil((hi[i] - lo[i]) / cell)) + 1) for i in range(3))
    return lo, dims


def build_occlusion_field(scene: SceneModel, origin, dims, cell: float,
                          d_thresh: float = 0.3, face_res: int = 32,
                          workers: int | None = None) -> OcclusionField:
    """Render six depth maps per grid node, threshold them to binary
    visibility, and project onto SH. Probes are independent, so the build
    parallelizes over nodes; the result does not depend on thread count."""
    origin = np.asarray(origin, dtype=np.float64)
    nx, ny, nz = dims
    degree = scene.degree
    k = n_coeffs(degree)
    values = np.empty((nx, ny, nz, k), dtype=np.float32)
    _face_geometry(face_res, degree)  # warm the shared cache before threading

    nodes = [(i, j, l) for i in range(nx) for j in range(ny) for l in range(nz)]

    def build_node(node):
        i, j, l = node
        center = origin + np.array([i, j, l]) * cell
        maps = render_probe_faces(scene, center, face_res)
        vis = probe_visibility(maps, d_thresh)
        values[i, j, l] = project_visibility_sh(vis, degree)

    if workers is None:
        import os
        workers = min(8, os.cpu_count() or 1)
    if workers <= 1:
        for node in nodes:
            build_node(node)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build_node, nodes))

    return OcclusionField(origin=origin, cell=cell, dims=(nx, ny, nz),
                          values=values, degree=degree,
                          d_thresh=d_thresh, face_res=face_res)


def save_field(field: OcclusionField, path) -> None:
    header = {
        "format": FIELD_FORMAT_NAME,
        "version": FIELD_FORMAT_VERSION,
        "degree": field.degree,
        "dims": list(field.dims),
        "origin": field.origin.tolist(),
        "cell": field.cell,
        "d_thresh": field.d_thresh,
        "face_res": field.face_res,
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(np.ascontiguousarray(field.values, dtype="<f4").tobytes())


def load_field(path) -> OcclusionField:
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError("occlusion field file: missing header line")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("format") != FIELD_FORMAT_NAME:
        raise ValueError("not an occlusion field file")
    if header.get("version") != FIELD_FORMAT_VERSION:
        raise ValueError(f"unsupported field version {header.get('version')}")
    dims = tuple(header["dims"])
    k = n_coeffs(int(header["degree"]))
    expected = int(np.prod(dims)) * k * 4
    payload = data[nl + 1 :]
    if len(payload) != expected:
        raise ValueError(f"field payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(dims + (k,)).copy()
    return OcclusionField(
        origin=np.array(header["origin"]), cell=float(header["cell"]),
        dims=dims, values=values, degree=int(header["degree"]),
        d_thresh=float(header["d_thresh"]), face_res=int(header["face_res"]))


# --------------------------------------------------------------------------
# shading
# --------------------------------------------------------------------------

def shade_colors(scene: SceneModel, light: EnvLight, occlusion: np.ndarray,
                 occlusion_scale: float = 1.0, transfer_scale: float = 1.0) -> np.ndarray:
    """Per-Gaussian shaded colors (N, 3): albedo * sum_m L[m] O[m] d[m].

    Returned unclamped and linear in the light; the renderer clamps negative
    radiance before compositing and the display path clamps to [0, 1]."""
    if light.degree != scene.degree:
        raise ValueError(f"light degree {light.degree} != scene degree {scene.degree}")
    lv = light.sh.values                       # (3, k)
    o = np.asarray(occlusion, dtype=np.float64)  # (N, k)
    d = scene.transfer.astype(np.float64)      # (N, k)
    triple = np.einsum("ck,nk,nk->nc", lv, o, d)
    triple *= occlusion_scale * transfer_scale
    return scene.albedos.astype(np.float64) * triple


def shade(gaussian, light: EnvLight, occlusion: ShCoeffs | np.ndarray) -> np.ndarray:
    """Shade a single Gaussian; occlusion may be ShCoeffs or a raw vector.
    Unclamped, like shade_colors."""
    o = occlusion.values[0] if isinstance(occlusion, ShCoeffs) else np.asarray(occlusion)
    if light.sh.values.shape[1] != len(o) or len(gaussian.transfer) != len(o):
        raise ValueError("SH degree mismatch between light, occlusion, and transfer")
    triple = (light.sh.values * o[None, :] * gaussian.transfer[None, :]).sum(axis=1)
    return np.asarray(gaussian.albedo, dtype=np.float64) * triple


class Relit:
    """Shading mode for render(): environment light modulated by the
    occlusion field and per-Gaussian transfer."""

    def __init__(self, light: EnvLight, field: OcclusionField,
                 occlusion_scale: float = 1.0, transfer_scale: float = 1.0):
        self.light = light
        self.field = field
        self.occlusion_scale = occlusion_scale
        self.transfer_scale = transfer_scale

    def gaussian_colors(self, scene: SceneModel, camera) -> np.ndarray:
        occ = self.field.occlusion_for(scene)
        colors = shade_colors(scene, self.light, occ,
                              self.occlusion_scale, self.transfer_scale)
        return np.maximum(colors, 0.0)  # no negative radiance into the blend

    def default_background(self):
        return ("sky", self.light.mean_radiance())


# --------------------------------------------------------------------------
# light specs (CLI / config JSON)
# --------------------------------------------------------------------------

LIGHT_PRESETS = {
    "original": dict(rotation_deg=0.0, intensity=1.0, tint=(1.0, 1.0, 1.0)),
    "overcast": dict(rotation_deg=0.0, intensity=0.55, tint=(0.95, 0.97, 1.02)),
    "dusk": dict(rotation_deg=140.0, intensity=0.35, tint=(0.80, 0.88, 1.18)),
    "morning": dict(rotation_deg=-60.0, intensity=1.25, tint=(1.18, 1.02, 0.82)),
}


def light_from_spec(spec, degree: int) -> EnvLight:
    """Build a light from a JSON-style spec: either {"panorama": path} or
    {"rotation_deg", "intensity", "tint"} edits of the default sky (or of a
    panorama when both are given), or {"preset": name}."""
    if isinstance(spec, str):
        with open(spec, "r", encoding="utf-8") as f:
            spec = json.load(f)
    if not isinstance(spec, dict):
        raise ValueError("light spec must be a JSON object")
    if "preset" in spec:
        spec = {**LIGHT_PRESETS[spec["preset"]], **{k: v for k, v in spec.items() if k != "preset"}}
    if "uniform" in spec:
        base = uniform_light(degree, float(spec["uniform"]))
    elif "panorama" in spec:
        base = panorama_to_sh(read_pfm(spec["panorama"]), degree,
                              name=str(spec["panorama"]))
    else:
        base = default_sky_light(degree)
    rotation = np.radians(float(spec.get("rotation_deg", 0.0)))
    intensity = float(spec.get("intensity", 1.0))
    tint = spec.get("tint", (1.0, 1.0, 1.0))
    if rotation == 0.0 and intensity == 1.0 and tuple(tint) == (1.0, 1.0, 1.0):
        return base
    return edit_light(base, rotation, intensity, tint)
