"""Gaussian scene model: struct-of-arrays storage, versioned binary file
format, procedural forest generation, and point-cloud extraction.

All per-Gaussian arrays are float32 (the on-disk precision) and are marked
read-only after construction so scenes can be shared across environment
instances without copies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .sh import Y00, cosine_lobes, n_coeffs, rotate_z_values

FORMAT_NAME = "rnsim-scene"
FORMAT_VERSION = 1


class SceneFormatError(ValueError):
    """Malformed scene file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic splat (convenience view; scenes store arrays)."""

    position: np.ndarray          # (3,) center, m
    rotation: np.ndarray          # (4,) unit quaternion (w, x, y, z)
    scale: np.ndarray             # (3,) per-axis std dev, m, > 0
    opacity: float                # [0, 1]
    albedo: np.ndarray            # (3,) diffuse albedo in [0, 1]
    transfer: np.ndarray          # ((l+1)^2,) 1-channel transfer SH
    baked: np.ndarray | None = None  # (3, (l+1)^2) view-independent radiance SH


def quat_to_rot(quats: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    q = np.asarray(quats, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def shading_normals(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Heuristic per-Gaussian normal: the rotation-frame axis with the
    smallest scale (the splat's flattest direction), oriented upward.

    Near-isotropic Gaussians (scale spread < 10%) have no meaningful flat
    axis and default to +z. Horizontal normals disambiguate their sign by
    positive x, then positive y.
    """
    r = quat_to_rot(rotations)
    s = np.asarray(scales, dtype=np.float64)
    axis = np.argmin(s, axis=1)
    n = r[np.arange(len(s)), :, axis]
    spread = s.max(axis=1) / s.min(axis=1)
    n[spread < 1.1] = (0.0, 0.0, 1.0)
    flip = (n[:, 2] < -1e-9) | (
        (np.abs(n[:, 2]) <= 1e-9) & ((n[:, 0] < -1e-9) |
                                     ((np.abs(n[:, 0]) <= 1e-9) & (n[:, 1] < 0))))
    n[flip] *= -1.0
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return n


@dataclass
class SceneModel:
    """Immutable collection of Gaussians plus scene metadata."""

    positions: np.ndarray   # (N, 3) float32
    rotations: np.ndarray   # (N, 4) float32 quaternions (w, x, y, z)
    scales: np.ndarray      # (N, 3) float32
    opacities: np.ndarray   # (N,) float32
    albedos: np.ndarray     # (N, 3) float32
    transfer: np.ndarray    # (N, (l+1)^2) float32
    baked: np.ndarray | None  # (N, 3, (l+1)^2) float32 or None
    degree: int
    bounds: np.ndarray      # (2, 3) float32 min/max corners
    ground_z: float = 0.0
    name: str = ""
    seed: int = 0
    # optional explicit normals; when absent the heuristic above is used
    normals_override: np.ndarray | None = field(default=None, repr=False)
    _normals: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        arrays = dict(
            positions=(np.float32, 2), rotations=(np.float32, 2),
            scales=(np.float32, 2), opacities=(np.float32, 1),
            albedos=(np.float32, 2), transfer=(np.float32, 2),
        )
        for attr, (dtype, ndim) in arrays.items():
            a = np.ascontiguousarray(getattr(self, attr), dtype=dtype)
            if a.ndim != ndim:
                raise SceneFormatError(f"{attr}: expected {ndim}-d array, got {a.ndim}-d")
            setattr(self, attr, a)
        if self.baked is not None:
            self.baked = np.ascontiguousarray(self.baked, dtype=np.float32)
        self.bounds = np.ascontiguousarray(self.bounds, dtype=np.float32).reshape(2, 3)
        self.validate()
        for a in (self.positions, self.rotations, self.scales, self.opacities,
                  self.albedos, self.transfer, self.baked, self.bounds):
            if a is not None:
                a.setflags(write=False)

    def validate(self):
        n = len(self.positions)
        if n == 0:
            raise SceneFormatError("scene has no Gaussians")
        k = n_coeffs(self.degree)
        if self.transfer.shape != (n, k):
            raise SceneFormatError(
                f"transfer shape {self.transfer.shape} != ({n}, {k}) for degree {self.degree}")
        if self.baked is not None and self.baked.shape != (n, 3, k):
            raise SceneFormatError(f"baked shape {self.baked.shape} != ({n}, 3, {k})")
        for attr in ("positions", "rotations", "scales", "opacities", "albedos", "transfer"):
            a = getattr(self, attr)
            if len(a) != n:
                raise SceneFormatError(f"{attr} length {len(a)} != {n}")
            if not np.all(np.isfinite(a)):
                flat_ok = np.isfinite(a).reshape(len(a), -1).all(axis=1)
                idx = int(np.flatnonzero(~flat_ok)[0])
                raise SceneFormatError(f"{attr}: non-finite value at Gaussian {idx}")
        bad = np.flatnonzero((self.opacities < 0.0) | (self.opacities > 1.0))
        if bad.size:
            raise SceneFormatError(
                f"opacity {self.opacities[bad[0]]:.4g} outside [0, 1] at Gaussian {bad[0]}")
        bad = np.flatnonzero(~np.all(self.scales > 0.0, axis=1))
        if bad.size:
            raise SceneFormatError(f"non-positive scale at Gaussian {bad[0]}")
        bad = np.flatnonzero(~np.all((self.albedos >= 0.0) & (self.albedos <= 1.0), axis=1))
        if bad.size:
            raise SceneFormatError(f"albedo outside [0, 1]^3 at Gaussian {bad[0]}")
        lo, hi = self.bounds[0] - 1e-3, self.bounds[1] + 1e-3
        inside = np.all((self.positions >= lo) & (self.positions <= hi), axis=1)
        if not inside.all():
            idx = int(np.flatnonzero(~inside)[0])
            raise SceneFormatError(f"Gaussian {idx} center outside scene bounds")

    def __len__(self) -> int:
        return len(self.positions)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            scale=self.scales[i].copy(),
            opacity=float(self.opacities[i]),
            albedo=self.albedos[i].copy(),
            transfer=self.transfer[i].copy(),
            baked=None if self.baked is None else self.baked[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian], degree: int, bounds,
                       ground_z: float = 0.0, name: str = "", seed: int = 0) -> "SceneModel":
        has_baked = gaussians[0].baked is not None if gaussians else False
        return cls(
            positions=np.array([g.position for g in gaussians], dtype=np.float32),
            rotations=np.array([g.rotation for g in gaussians], dtype=np.float32),
            scales=np.array([g.scale for g in gaussians], dtype=np.float32),
            opacities=np.array([g.opacity for g in gaussians], dtype=np.float32),
            albedos=np.array([g.albedo for g in gaussians], dtype=np.float32),
            transfer=np.array([g.transfer for g in gaussians], dtype=np.float32),
            baked=np.array([g.baked for g in gaussians], dtype=np.float32) if has_baked else None,
            degree=degree, bounds=np.asarray(bounds, dtype=np.float32),
            ground_z=ground_z, name=name, seed=seed,
        )

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) world-space covariances R S S^T R^T."""
        r = quat_to_rot(self.rotations)
        s = self.scales.astype(np.float64)
        rs = r * s[:, None, :]
        return rs @ rs.transpose(0, 2, 1)

    def normals(self) -> np.ndarray:
        """Per-Gaussian shading normals, (N, 3); cached."""
        if self._normals is None:
            if self.normals_override is not None:
                n = np.ascontiguousarray(self.normals_override, dtype=np.float64)
            else:
                n = shading_normals(self.rotations, self.scales)
            n.setflags(write=False)
            self._normals = n
        return self._normals


# --------------------------------------------------------------------------
# file format: one JSON header line, then float32 little-endian field arrays
# --------------------------------------------------------------------------

_FIELD_ORDER = ("positions", "rotations", "scales", "opacities", "albedos", "transfer", "baked")


def save_scene(scene: SceneModel, path) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "degree": scene.degree,
        "count": len(scene),
        "bounds": scene.bounds.astype(float).tolist(),
        "ground_z": float(scene.ground_z),
        "name": scene.name,
        "seed": int(scene.seed),
        "has_baked": scene.baked is not None,
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for name in _FIELD_ORDER:
            a = getattr(scene, name)
            if a is None:
                continue
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_scene(path) -> SceneModel:
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise SceneFormatError("missing header line", offset=len(data))
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise SceneFormatError(f"invalid JSON header: {e}", offset=0) from e
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise SceneFormatError("not a scene file (bad format tag)", offset=0)
    if header.get("version") != FORMAT_VERSION:
        raise SceneFormatError(
            f"unsupported scene version {header.get('version')} "
            f"(expected {FORMAT_VERSION})", offset=0)

    n = int(header["count"])
    degree = int(header["degree"])
    k = n_coeffs(degree)
    shapes = {
        "positions": (n, 3), "rotations": (n, 4), "scales": (n, 3),
        "opacities": (n,), "albedos": (n, 3), "transfer": (n, k),
    }
    if header.get("has_baked"):
        shapes["baked"] = (n, 3, k)

    offset = nl + 1
    arrays = {}
    for name in _FIELD_ORDER:
        if name not in shapes:
            continue
        shape = shapes[name]
        nbytes = int(np.prod(shape)) * 4
        chunk = data[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise SceneFormatError(
                f"truncated file while reading '{name}' "
                f"(need {nbytes} bytes, have {len(chunk)})", offset=offset)
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise SceneFormatError(f"{len(data) - offset} trailing bytes", offset=offset)

    return SceneModel(
        positions=arrays["positions"], rotations=arrays["rotations"],
        scales=arrays["scales"], opacities=arrays["opacities"],
        albedos=arrays["albedos"], transfer=arrays["transfer"],
        baked=arrays.get("baked"), degree=degree,
        bounds=np.array(header["bounds"], dtype=np.float32),
        ground_z=float(header.get("ground_z", 0.0)),
        name=str(header.get("name", "")), seed=int(header.get("seed", 0)),
    )


# --------------------------------------------------------------------------
# procedural forest
# --------------------------------------------------------------------------

@dataclass
class ForestParams:
    trunk_height: tuple[float, float] = (2.6, 4.4)     # m
    trunk_radius: tuple[float, float] = (0.10, 0.22)   # m (Gaussian std dev)
    trunk_segment: float = 0.7                          # m between stacked splats
    canopy_radius: tuple[float, float] = (0.9, 1.8)    # m cluster radius
    canopy_blob: tuple[float, float] = (0.30, 0.55)    # m blob std dev
    canopy_blobs: int = 9
    ground_spacing: float = 1.5                         # m between ground splats
    border_margin: float = 0.5                          # m trunk keep-out from edges
    min_tree_spacing: float = 2.2                       # m between trunk centers
    trunk_palette: tuple = ((0.36, 0.25, 0.15), (0.42, 0.30, 0.18), (0.30, 0.22, 0.14))
    canopy_palette: tuple = ((0.10, 0.35, 0.08), (0.16, 0.42, 0.10), (0.08, 0.28, 0.10))
    ground_palette: tuple = ((0.22, 0.30, 0.12), (0.28, 0.34, 0.14), (0.20, 0.26, 0.13))
    transfer_mode: str = "cosine"                       # "cosine" | "unit-dc"
    baked_exposure: float = 1.0


def gen_forest(seed: int, size: float = 60.0, n_trees: int = 50,
               degree: int = 2, params: ForestParams | None = None) -> SceneModel:
    """Deterministic procedural forest over a size x size m area centered at
    the origin: a ground sheet of flat splats, trunks as stacked vertical
    splats, canopies as isotropic blob clusters."""
    if n_trees < 0:
        raise ValueError("n_trees must be >= 0")
    if size <= 0:
        raise ValueError("size must be positive")
    p = params or ForestParams()
    rng = np.random.default_rng(seed)
    half = size / 2.0

    positions, rotations, scales, opacities, albedos = [], [], [], [], []

    def add(pos, rot, scale, opacity, albedo):
        positions.append(np.asarray(pos, dtype=np.float64))
        rotations.append(np.asarray(rot, dtype=np.float64))
        scales.append(np.asarray(scale, dtype=np.float64))
        opacities.append(float(opacity))
        albedos.append(np.clip(np.asarray(albedo, dtype=np.float64), 0.0, 1.0))

    identity = np.array([1.0, 0.0, 0.0, 0.0])

    # ground sheet
    n_cells = max(2, int(np.ceil(size / p.ground_spacing)) + 1)
    coords = np.linspace(-half, half, n_cells)
    for gy in coords:
        for gx in coords:
            albedo = np.array(p.ground_palette[rng.integers(len(p.ground_palette))])
            add((gx, gy, 0.0), identity,
                (p.ground_spacing * 0.75, p.ground_spacing * 0.75, 0.02),
                0.85, albedo * rng.uniform(0.85, 1.15))

    # trees: rejection-sample trunk centers with spacing and border margin
    centers: list[np.ndarray] = []
    attempts = 0
    lo, hi = -half + p.border_margin, half - p.border_margin
    while len(centers) < n_trees and attempts < n_trees * 200 + 100:
        attempts += 1
        c = rng.uniform(lo, hi, 2)
        if all(np.hypot(*(c - e)) >= p.min_tree_spacing for e in centers):
            centers.append(c)
    if len(centers) < n_trees:
        raise ValueError(
            f"could not place {n_trees} trees with spacing "
            f"{p.min_tree_spacing} m in a {size}x{size} m area")

    max_z = 0.5
    for cx, cy in centers:
        height = rng.uniform(*p.trunk_height)
        radius = rng.uniform(*p.trunk_radius)
        trunk_albedo = np.array(p.trunk_palette[rng.integers(len(p.trunk_palette))])
        n_seg = max(2, int(np.ceil(height / p.trunk_segment)))
        zs = np.linspace(p.trunk_segment * 0.5, height - p.trunk_segment * 0.4, n_seg)
        lean = rng.normal(0.0, 0.03, 2)  # slight trunk lean, m per m of height
        phi = rng.uniform(0.0, np.pi)    # azimuth of the trunk's flat axis
        # flatten one horizontal axis slightly so the shading normal is a
        # well-defined horizontal direction
        rot = np.array([np.cos(phi / 2.0), 0.0, 0.0, np.sin(phi / 2.0)])
        for z in zs:
            add((cx + lean[0] * z, cy + lean[1] * z, z), rot,
                (radius * 0.8, radius * 1.2, p.trunk_segment * 0.75),
                0.95, trunk_albedo * rng.uniform(0.9, 1.1))
        crad = rng.uniform(*p.canopy_radius)
        canopy_albedo = np.array(p.canopy_palette[rng.integers(len(p.canopy_palette))])
        top = np.array([cx + lean[0] * height, cy + lean[1] * height, height])
        for _ in range(p.canopy_blobs):
            off = rng.normal(0.0, crad * 0.5, 3)
            off[2] *= 0.7
            pos = top + off
            pos[0] = np.clip(pos[0], -half, half)
            pos[1] = np.clip(pos[1], -half, half)
            pos[2] = max(pos[2], height * 0.6)
            blob = rng.uniform(*p.canopy_blob)
            add(pos, identity, (blob, blob, blob), 0.65,
                canopy_albedo * rng.uniform(0.85, 1.15))  # isotropic -> +z normal
            max_z = max(max_z, pos[2] + 3.0 * blob)

    rot_arr = np.array(rotations)
    scale_arr = np.array(scales)
    albedo_arr = np.array(albedos)
    k = n_coeffs(degree)

    if p.transfer_mode == "unit-dc":
        transfer = np.zeros((len(positions), k))
        transfer[:, 0] = 1.0
    elif p.transfer_mode == "cosine":
        transfer = cosine_lobes(degree, shading_normals(rot_arr, scale_arr))
    else:
        raise ValueError(f"unknown transfer mode {p.transfer_mode!r}")

    baked = np.zeros((len(positions), 3, k))
    baked[:, :, 0] = albedo_arr * p.baked_exposure / Y00

    bounds = np.array([[-half, -half, -0.1], [half, half, max(max_z, 3.0)]])
    return SceneModel(
        positions=np.array(positions), rotations=rot_arr, scales=scale_arr,
        opacities=np.array(opacities), albedos=albedo_arr, transfer=transfer,
        baked=baked, degree=degree, bounds=bounds, ground_z=0.0,
        name=f"forest-{n_trees}t-{size:g}m", seed=seed)


def extract_point_cloud(scene: SceneModel, alpha_min: float = 0.0) -> np.ndarray:
    """Gaussian centers with opacity >= alpha_min, in scene order: (M, 3)."""
    mask = scene.opacities >= alpha_min
    return scene.positions[mask].astype(np.float64)


def rotate_scene_z(scene: SceneModel, theta: float, center) -> SceneModel:
    """Rigidly rotate every Gaussian by theta about a vertical axis through
    `center`, carrying orientation, normals, transfer, and baked SH along."""
    c = np.asarray(center, dtype=np.float64)
    rot = np.array([
        [np.cos(theta), -np.sin(theta), 0.0],
        [np.sin(theta), np.cos(theta), 0.0],
        [0.0, 0.0, 1.0],
    ])
    pos = (scene.positions.astype(np.float64) - c) @ rot.T + c
    qz = np.array([np.cos(theta / 2.0), 0.0, 0.0, np.sin(theta / 2.0)])
    q = scene.rotations.astype(np.float64)
    quats = np.stack([
        qz[0] * q[:, 0] - qz[3] * q[:, 3],
        qz[0] * q[:, 1] - qz[3] * q[:, 2],
        qz[0] * q[:, 2] + qz[3] * q[:, 1],
        qz[0] * q[:, 3] + qz[3] * q[:, 0],
    ], axis=1)
    transfer = rotate_z_values(scene.transfer.astype(np.float64), scene.degree, theta)
    baked = None
    if scene.baked is not None:
        baked = rotate_z_values(scene.baked.astype(np.float64), scene.degree, theta)
    normals = scene.normals() @ rot.T

    corners = np.concatenate([pos, scene.bounds.astype(np.float64)])
    bounds = np.stack([corners.min(axis=0) - 0.5, corners.max(axis=0) + 0.5])
    return SceneModel(
        positions=pos, rotations=quats, scales=scene.scales.copy(),
        opacities=scene.opacities.copy(), albedos=scene.albedos.copy(),
        transfer=transfer, baked=baked, degree=scene.degree,
        bounds=bounds, ground_z=scene.ground_z,
        name=scene.name + f"+rotz{theta:.3f}", seed=scene.seed,
        normals_override=normals)
