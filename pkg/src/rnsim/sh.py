"""Real spherical harmonics: basis evaluation, coefficient containers, z-rotation.

Conventions (these fix the on-disk coefficient layout, do not change them):
  * Real SH with Condon-Shortley phase, orthonormal over the unit sphere.
  * Flat index order: bands ascending, m from -l to +l, so
    index(l, m) = l*(l+1) + m and a degree-l set has (l+1)^2 entries.
  * z is "up"; azimuth phi is measured from +x toward +y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEGREE = 4

# 1/(2 sqrt(pi)), the constant band-0 basis value
Y00 = 0.28209479177387814


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * (l + 1) + m


def eval_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the real SH basis at unit direction(s).

    dirs: (..., 3) unit vectors. Returns (..., (degree+1)^2) basis values.
    Raises ValueError for non-unit input (1e-6 tolerance) or degree > MAX_DEGREE.
    """
    if degree < 0 or degree > MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    d = np.asarray(dirs, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError(f"directions must have shape (..., 3), got {d.shape}")
    norms = np.linalg.norm(d, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"directions must be unit length (max |norm-1| = {worst:.3g})")

    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (n_coeffs(degree),), dtype=np.float64)
    out[..., 0] = Y00
    if degree >= 1:
        out[..., 1] = -0.4886025119029199 * y
        out[..., 2] = 0.4886025119029199 * z
        out[..., 3] = -0.4886025119029199 * x
    if degree >= 2:
        out[..., 4] = 1.0925484305920792 * x * y
        out[..., 5] = -1.0925484305920792 * y * z
        out[..., 6] = 0.31539156525252005 * (3.0 * z * z - 1.0)
        out[..., 7] = -1.0925484305920792 * x * z
        out[..., 8] = 0.5462742152960396 * (x * x - y * y)
    if degree >= 3:
        x2, y2, z2 = x * x, y * y, z * z
        out[..., 9] = -0.5900435899266435 * y * (3.0 * x2 - y2)
        out[..., 10] = 2.890611442640554 * x * y * z
        out[..., 11] = -0.4570457994644658 * y * (4.0 * z2 - x2 - y2)
        out[..., 12] = 0.3731763325901154 * z * (5.0 * z2 - 3.0)
        out[..., 13] = -0.4570457994644658 * x * (4.0 * z2 - x2 - y2)
        out[..., 14] = 1.445305721320277 * z * (x2 - y2)
        out[..., 15] = -0.5900435899266435 * x * (x2 - 3.0 * y2)
    if degree >= 4:
        x2, y2, z2 = x * x, y * y, z * z
        out[..., 16] = 2.5033429417967046 * x * y * (x2 - y2)
        out[..., 17] = -1.7701307697799304 * y * z * (3.0 * x2 - y2)
        out[..., 18] = 0.9461746957575601 * x * y * (7.0 * z2 - 1.0)
        out[..., 19] = -0.6690465435572892 * y * z * (7.0 * z2 - 3.0)
        out[..., 20] = 0.10578554691520431 * (35.0 * z2 * z2 - 30.0 * z2 + 3.0)
        out[..., 21] = -0.6690465435572892 * x * z * (7.0 * z2 - 3.0)
        out[..., 22] = 0.47308734787878004 * (x2 - y2) * (7.0 * z2 - 1.0)
        out[..., 23] = -1.7701307697799304 * x * z * (x2 - 3.0 * y2)
        out[..., 24] = 0.6258357354491761 * (x2 * x2 - 6.0 * y2 * x2 + y2 * y2)
    return out


@dataclass(frozen=True)
class ShCoeffs:
    """Per-channel real SH coefficient vector.

    values has shape (channels, (degree+1)^2) with channels 1 or 3.
    Immutable; all ops return new instances.
    """

    degree: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[None, :]
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if v.shape[0] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {v.shape[0]}")
        if v.shape[1] != n_coeffs(self.degree):
            raise ValueError(
                f"expected {n_coeffs(self.degree)} coefficients per channel "
                f"for degree {self.degree}, got {v.shape[1]}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("SH coefficients must be finite")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, degree: int, channels: int = 1) -> "ShCoeffs":
        return cls(degree, np.zeros((channels, n_coeffs(degree))))

    @classmethod
    def dc(cls, degree: int, dc_values, channels: int | None = None) -> "ShCoeffs":
        """Coefficients with only the band-0 entry set (per channel)."""
        dc = np.atleast_1d(np.asarray(dc_values, dtype=np.float64))
        if channels is None:
            channels = len(dc)
        v = np.zeros((channels, n_coeffs(degree)))
        v[:, 0] = dc
        return cls(degree, v)

    def eval(self, dirs: np.ndarray) -> np.ndarray:
        """Reconstruct the function at direction(s): (..., channels)."""
        basis = eval_basis(self.degree, dirs)
        return basis @ self.values.T

    def scaled(self, factor) -> "ShCoeffs":
        f = np.atleast_1d(np.asarray(factor, dtype=np.float64))
        return ShCoeffs(self.degree, self.values * f[:, None])


def rotate_z_values(values: np.ndarray, degree: int, theta: float) -> np.ndarray:
    """Rotate raw coefficient array(s) of shape (..., (degree+1)^2) by +theta
    about z. Band m=0 entries are untouched; each (+m, -m) pair rotates by
    the 2x2 block of angle m*theta."""
    v = np.array(values, dtype=np.float64)
    for l in range(1, degree + 1):
        base = l * (l + 1)
        for m in range(1, l + 1):
            cm, sm = np.cos(m * theta), np.sin(m * theta)
            plus = v[..., base + m].copy()
            minus = v[..., base - m].copy()
            v[..., base + m] = plus * cm - minus * sm
            v[..., base - m] = plus * sm + minus * cm
    return v


def rotate_z(c: ShCoeffs, theta: float) -> ShCoeffs:
    """Rotate a coefficient set by +theta about the z axis.

    The result evaluates as the original function rotated: for all w,
    eval(rotate_z(c, t), w) == eval(c, Rz(-t) @ w).
    """
    return ShCoeffs(c.degree, rotate_z_values(c.values, c.degree, theta))


def dot(a: ShCoeffs, b: ShCoeffs) -> np.ndarray:
    """Per-channel coefficient dot product; 1-channel inputs broadcast to 3."""
    if a.degree != b.degree:
        raise ValueError(f"SH degree mismatch: {a.degree} vs {b.degree}")
    return np.sum(a.values * b.values, axis=1)


def zonal_to_direction(zonal: np.ndarray, degree: int, direction: np.ndarray) -> np.ndarray:
    """Re-aim a zonal (m=0 only) SH function from +z to an arbitrary axis.

    zonal[l] is the coefficient of Y_l0 for the +z-aligned function; returns
    the full (degree+1)^2 coefficient vector of the same function about
    `direction`, via c_lm = sqrt(4 pi / (2l+1)) * zonal[l] * Y_lm(direction).
    """
    basis = eval_basis(degree, direction)
    out = np.empty(n_coeffs(degree))
    for l in range(degree + 1):
        scale = np.sqrt(4.0 * np.pi / (2 * l + 1)) * zonal[l]
        for m in range(-l, l + 1):
            idx = sh_index(l, m)
            out[idx] = scale * basis[..., idx]
    return out


# Zonal coefficients of the clamped cosine lobe max(0, w . z), bands 0..4.
# Band integrals: pi, 2pi/3, pi/4, 0, -pi/24, each times sqrt((2l+1)/(4 pi)).
_COS_LOBE_ZONAL = np.array([
    np.pi * 0.28209479177387814,
    (2.0 * np.pi / 3.0) * 0.4886025119029199,
    (np.pi / 4.0) * 0.6307831305050401,
    0.0,
    (-np.pi / 24.0) * 0.8462843753216345,
])


def cosine_lobe(degree: int, normal: np.ndarray) -> np.ndarray:
    """SH coefficients of the clamped cosine max(0, w . n) about unit normal n."""
    if degree > 4:
        raise ValueError("cosine lobe tabulated up to degree 4")
    return zonal_to_direction(_COS_LOBE_ZONAL[: degree + 1], degree, normal)


def cosine_lobes(degree: int, normals: np.ndarray) -> np.ndarray:
    """Vectorized cosine_lobe: (N, 3) unit normals -> (N, (degree+1)^2)."""
    if degree > 4:
        raise ValueError("cosine lobe tabulated up to degree 4")
    basis = eval_basis(degree, normals)
    w = np.empty(n_coeffs(degree))
    for l in range(degree + 1):
        w[l * l : (l + 1) * (l + 1)] = (
            np.sqrt(4.0 * np.pi / (2 * l + 1)) * _COS_LOBE_ZONAL[l])
    return basis * w


def uniform_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    """n uniformly distributed unit vectors, (n, 3)."""
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
