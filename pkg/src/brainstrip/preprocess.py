"""Harmonization kernels: curvature-flow denoising, low-order bias-field
correction and rigid co-registration.

The bias correction is a log-domain polynomial fit, not N4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from brainstrip.volume import Volume3D, resample_to_grid


class PreprocessError(ValueError):
    pass


class RegistrationError(RuntimeError):
    """Optimization could not improve on the initial transform; ``best``
    holds the best transform found."""

    def __init__(self, message: str, best: RigidTransform):
        super().__init__(message)
        self.best = best


# -- curvature flow ---------------------------------------------------------------


def _curvature_speed(u: np.ndarray) -> np.ndarray:
    """kappa * |grad u| by central differences with replicated edges."""
    p = np.pad(u, 1, mode="edge")
    c = p[1:-1, 1:-1, 1:-1]

    def sh(dx, dy, dz):
        return p[1 + dx : p.shape[0] - 1 + dx, 1 + dy : p.shape[1] - 1 + dy, 1 + dz : p.shape[2] - 1 + dz]

    ux = (sh(1, 0, 0) - sh(-1, 0, 0)) / 2.0
    uy = (sh(0, 1, 0) - sh(0, -1, 0)) / 2.0
    uz = (sh(0, 0, 1) - sh(0, 0, -1)) / 2.0
    uxx = sh(1, 0, 0) - 2 * c + sh(-1, 0, 0)
    uyy = sh(0, 1, 0) - 2 * c + sh(0, -1, 0)
    uzz = sh(0, 0, 1) - 2 * c + sh(0, 0, -1)
    uxy = (sh(1, 1, 0) - sh(1, -1, 0) - sh(-1, 1, 0) + sh(-1, -1, 0)) / 4.0
    uxz = (sh(1, 0, 1) - sh(1, 0, -1) - sh(-1, 0, 1) + sh(-1, 0, -1)) / 4.0
    uyz = (sh(0, 1, 1) - sh(0, 1, -1) - sh(0, -1, 1) + sh(0, -1, -1)) / 4.0
    grad2 = ux * ux + uy * uy + uz * uz
    num = (
        uxx * (uy * uy + uz * uz)
        + uyy * (ux * ux + uz * uz)
        + uzz * (ux * ux + uy * uy)
        - 2.0 * (ux * uy * uxy + ux * uz * uxz + uy * uz * uyz)
    )
    out = np.zeros_like(u)
    nz = grad2 > 1e-20
    out[nz] = num[nz] / grad2[nz]
    return out


def denoise_curvature_flow(vol: Volume3D, steps: int = 10, dt: float = 0.125) -> Volume3D:
    """Explicit evolution of dI/dt = kappa |grad I| for ``steps`` iterations."""
    if not 0 < dt <= 0.25:
        raise PreprocessError(f"dt={dt} outside the stable range (0, 0.25]")
    if steps < 0:
        raise PreprocessError("steps must be >= 0")
    u = np.asarray(vol.data, dtype=np.float64)
    if steps == 0:
        return vol.with_data(u.copy())
    lo, hi = u.min(), u.max()
    for _ in range(steps):
        # central differences can overshoot by O(dt * h^2); clipping keeps
        # the extremum principle exact
        u = np.clip(u + dt * _curvature_speed(u), lo, hi)
    return vol.with_data(u)


# -- bias field -----------------------------------------------------------------------


def _monomials(dims, order: int) -> np.ndarray:
    """Polynomial basis of total degree <= order on coordinates scaled to [-1, 1]."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    terms = []
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                terms.append((gx**i) * (gy**j) * (gz**k))
    return np.stack([t.ravel() for t in terms], axis=1)


def _neighbour_differences(log_x, mask, basis, max_pairs):
    """Log-intensity steps between face neighbours inside ``mask`` and the
    matching steps of every basis column, thinned to ``max_pairs`` per axis."""
    rows, rhs = [], []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis], hi[axis] = slice(0, -1), slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        ok = mask[lo] & mask[hi]
        step = max(1, int(ok.sum()) // max_pairs)
        rhs.append((log_x[hi] - log_x[lo])[ok][::step])
        rows.append((basis[hi] - basis[lo])[ok][::step])
    return np.concatenate(rows), np.concatenate(rhs)


def correct_bias_field(
    vol: Volume3D, order: int = 2, iterations: int = 10, max_pairs: int = 200_000
) -> tuple[Volume3D, Volume3D]:
    """Estimate a smooth multiplicative field and divide it out.

    The field is ``exp(P)`` for a polynomial ``P`` of total degree ``order``
    fitted by least squares to the log-image over brain-candidate voxels
    (above half the global mean). The fit runs on neighbour differences:
    inside one tissue the log-image changes only as fast as ``P`` does, while
    tissue boundaries are large jumps that Tukey-weighted reweighting drops.
    Working on differences also makes the fit blind to a global intensity
    scale. The field is normalized to mean 1 over the grid.
    """
    if order not in (1, 2, 3):
        raise PreprocessError(f"polynomial order must be 1, 2 or 3, got {order}")
    x = np.asarray(vol.data, dtype=np.float64)
    if np.any(x <= 0):
        raise PreprocessError("bias correction needs strictly positive voxels (log-domain fit)")
    if x.ndim != 3 or min(x.shape) < 2:
        raise PreprocessError("bias correction needs at least two voxels along every axis")
    # the constant column has zero differences; the mean-1 normalization fixes it
    basis = _monomials(vol.dims, order)[:, 1:].reshape(vol.dims + (-1,))
    d_basis, d_log = _neighbour_differences(np.log(x), x > 0.5 * x.mean(), basis, max_pairs)
    coef = np.zeros(basis.shape[-1])
    if d_log.size:
        weights = np.ones_like(d_log)
        for _ in range(iterations):
            sw = np.sqrt(weights)
            coef, *_ = np.linalg.lstsq(d_basis * sw[:, None], d_log * sw, rcond=None)
            resid = d_log - d_basis @ coef
            scale = 4.685 * 1.4826 * np.median(np.abs(resid))
            if scale <= 1e-12:
                break
            u = resid / scale
            weights = np.where(np.abs(u) < 1.0, (1.0 - u * u) ** 2, 0.0)
    log_field = basis @ coef
    field = np.exp(log_field - log_field.max())
    field /= field.mean()
    return vol.with_data(x / field), vol.with_data(field)


# -- rigid transforms -----------------------------------------------------------------


def _rot(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_x @ rot_y @ rot_z


def _euler_from_matrix(m: np.ndarray) -> tuple[float, float, float]:
    ry = math.asin(max(-1.0, min(1.0, m[0, 2])))
    rz = math.atan2(-m[0, 1], m[0, 0])
    rx = math.atan2(-m[1, 2], m[2, 2])
    return rx, ry, rz


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (radians, applied z then y then x about the target grid's
    physical center) followed by a translation (mm).

    Maps target-grid physical points to source-volume points:
    ``T(p) = R (p - c) + c + t``.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_params(cls, params) -> RigidTransform:
        p = [float(v) for v in params]
        return cls(tuple(p[:3]), tuple(p[3:]))

    @property
    def params(self) -> np.ndarray:
        return np.array(self.rotation + self.translation, dtype=np.float64)

    def matrix(self) -> np.ndarray:
        return _rot(*self.rotation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self`` after ``other``: p -> self(other(p))."""
        r1, r2 = self.matrix(), other.matrix()
        t = r1 @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidTransform(_euler_from_matrix(r1 @ r2), tuple(float(v) for v in t))

    def inverse(self) -> RigidTransform:
        r = self.matrix()
        t = -(r.T @ np.asarray(self.translation))
        return RigidTransform(_euler_from_matrix(r.T), tuple(float(v) for v in t))

    def to_line(self) -> str:
        return " ".join(repr(float(v)) for v in self.params)

    @classmethod
    def from_line(cls, line: str) -> RigidTransform:
        parts = line.split()
        if len(parts) != 6:
            raise PreprocessError(f"transform line needs 6 numbers, got {len(parts)}")
        return cls.from_params(float(p) for p in parts)


def grid_points(vol: Volume3D) -> np.ndarray:
    """Physical coordinates (3, N) of every voxel center, x fastest-varying last axis order."""
    idx = np.indices(vol.dims, dtype=np.float64).reshape(3, -1)
    return idx * np.asarray(vol.spacing)[:, None] + np.asarray(vol.origin)[:, None]


def grid_center(vol: Volume3D) -> np.ndarray:
    return np.asarray(vol.origin) + (np.asarray(vol.dims) - 1.0) / 2.0 * np.asarray(vol.spacing)


def transform_points(xform: RigidTransform, points: np.ndarray, center: np.ndarray) -> np.ndarray:
    c = center[:, None]
    return xform.matrix() @ (points - c) + c + np.asarray(xform.translation)[:, None]


def _sample(data: np.ndarray, coords: np.ndarray, method: str) -> np.ndarray:
    """Sample ``data`` at voxel coordinates (3, N); outside the grid -> 0.

    For ``method="cubic"`` ``data`` must already be spline coefficients.
    """
    dims = np.asarray(data.shape)
    tol = 1e-6
    inside = np.all((coords >= -tol) & (coords <= (dims - 1)[:, None] + tol), axis=0)
    c = np.clip(coords, 0.0, (dims - 1)[:, None].astype(np.float64))
    out = np.zeros(coords.shape[1])
    if method == "cubic":
        # ``data`` holds B-spline coefficients (ndimage.spline_filter)
        out[inside] = ndimage.map_coordinates(data, c[:, inside], order=3, prefilter=False, mode="nearest")
        return out
    if method == "nearest":
        i = np.floor(c + 0.5).astype(np.int64)
        i = np.minimum(i, (dims - 1)[:, None])
        out[inside] = data[i[0, inside], i[1, inside], i[2, inside]]
        return out
    c = c[:, inside]
    lo = np.minimum(np.floor(c).astype(np.int64), np.maximum(dims - 2, 0)[:, None])
    f = c - lo
    hi = np.minimum(lo + 1, (dims - 1)[:, None])
    acc = np.zeros(c.shape[1])
    for dx in (0, 1):
        wx = f[0] if dx else 1.0 - f[0]
        ix = hi[0] if dx else lo[0]
        for dy in (0, 1):
            wy = f[1] if dy else 1.0 - f[1]
            iy = hi[1] if dy else lo[1]
            for dz in (0, 1):
                wz = f[2] if dz else 1.0 - f[2]
                iz = hi[2] if dz else lo[2]
                acc += wx * wy * wz * data[ix, iy, iz]
    out[inside] = acc
    return out


def apply_transform(vol: Volume3D, xform: RigidTransform, target: Volume3D, method: str = "trilinear") -> Volume3D:
    """Resample ``vol`` onto ``target``'s grid at ``xform``-mapped positions."""
    if method not in ("trilinear", "nearest"):
        raise PreprocessError(f"unknown interpolation {method!r}")
    pts = transform_points(xform, grid_points(target), grid_center(target))
    vox = (pts - np.asarray(vol.origin)[:, None]) / np.asarray(vol.spacing)[:, None]
    data = np.asarray(vol.data, dtype=np.float64)
    values = _sample(data, vox, method).reshape(target.dims)
    if method == "nearest":
        values = values.astype(vol.dtype)
    return Volume3D(values, target.spacing, target.origin)


# -- registration ---------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationOptions:
    metric: str = "mse"
    pyramid_levels: int = 3
    max_iterations: int = 25
    min_step: float = 1e-3
    fd_step: float = 0.25
    # cubic B-spline sampling on the coarse pyramid levels, where trilinear
    # error exceeds the signal of a few degrees of rotation; the full
    # resolution level always uses trilinear (cheaper, error is small there)
    interpolation: str = "cubic"

    def __post_init__(self):
        if self.metric not in ("mse", "ncc"):
            raise PreprocessError(f"metric must be 'mse' or 'ncc', got {self.metric!r}")
        if self.interpolation not in ("cubic", "trilinear"):
            raise PreprocessError(f"interpolation must be 'cubic' or 'trilinear', got {self.interpolation!r}")
        if self.pyramid_levels < 1 or self.max_iterations < 1:
            raise PreprocessError("pyramid_levels and max_iterations must be >= 1")
        if not self.min_step > 0 or not self.fd_step > 0:
            raise PreprocessError("min_step and fd_step must be positive")


def _residual(kind: str, warped: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """Residual whose mean square is the metric (up to an affine map for NCC:
    mean(r^2) = 2 (1 - ncc))."""
    if kind == "mse":
        return warped - fixed
    w0 = warped - warped.mean()
    f0 = fixed - fixed.mean()
    wn = math.sqrt(float(np.mean(w0 * w0)))
    fn = math.sqrt(float(np.mean(f0 * f0)))
    if wn == 0 or fn == 0:
        return np.full_like(fixed, math.sqrt(2.0))
    return w0 / wn - f0 / fn


def _pyramid_level(vol: Volume3D, level: int) -> Volume3D:
    if level == 0:
        return vol
    factor = 2**level
    smooth = ndimage.gaussian_filter(np.asarray(vol.data, dtype=np.float64), sigma=0.5 * factor, mode="nearest")
    dims = tuple(max(2, int(math.ceil(n / factor))) for n in vol.dims)
    return resample_to_grid(vol.with_data(smooth), dims, "trilinear")


def register_rigid(
    moving: Volume3D, fixed: Volume3D, opts: RegistrationOptions = RegistrationOptions()
) -> RigidTransform:
    """Rigid transform T minimizing metric(apply_transform(moving, T, fixed), fixed).

    Coarse-to-fine over a smoothed pyramid. Each iteration takes a damped
    Gauss-Newton (Levenberg-Marquardt) step built from a central
    finite-difference Jacobian of the residual image with respect to the six
    parameters; rotations are scaled by the grid radius so every parameter
    is in millimetres.
    """
    for name, v in (("moving", moving), ("fixed", fixed)):
        if np.ptp(np.asarray(v.data)) == 0:
            raise PreprocessError(f"{name} volume is constant")
    extent = (np.asarray(fixed.dims) - 1.0) * np.asarray(fixed.spacing)
    radius = max(float(np.linalg.norm(extent) / 2.0), 1e-6)
    scale = np.array([radius] * 3 + [1.0] * 3)
    center = grid_center(fixed)

    u = np.zeros(6)  # scaled parameters (mm)
    for level in reversed(range(opts.pyramid_levels)):
        fix_l = _pyramid_level(fixed, level)
        mov_l = _pyramid_level(moving, level)
        fixed_data = np.asarray(fix_l.data, dtype=np.float64).ravel()
        pts = grid_points(fix_l)
        mov_data = np.asarray(mov_l.data, dtype=np.float64)
        method = "cubic" if opts.interpolation == "cubic" and level > 0 else "trilinear"
        if method == "cubic":
            mov_data = ndimage.spline_filter(mov_data, order=3, mode="nearest")
        mov_origin = np.asarray(mov_l.origin)[:, None]
        mov_spacing = np.asarray(mov_l.spacing)[:, None]
        voxel = float(np.mean(fix_l.spacing))

        def residual(uu):
            xf = RigidTransform.from_params(uu / scale)
            q = transform_points(xf, pts, center)
            warped = _sample(mov_data, (q - mov_origin) / mov_spacing, method)
            return _residual(opts.metric, warped, fixed_data)

        h = opts.fd_step * voxel
        r = residual(u)
        current = float(np.mean(r * r))
        start_value = current
        accepted = 0
        damping = None
        for _ in range(opts.max_iterations):
            jac = np.empty((r.size, 6))
            for k in range(6):
                e = np.zeros(6)
                e[k] = h
                jac[:, k] = (residual(u + e) - residual(u - e)) / (2 * h)
            a = jac.T @ jac
            g = jac.T @ r
            diag = np.diag(a).copy()
            diag[diag == 0] = 1.0
            if damping is None:
                damping = 1e-3
            improved = False
            for _ in range(12):
                delta = -np.linalg.solve(a + damping * np.diag(diag), g)
                r_trial = residual(u + delta)
                value = float(np.mean(r_trial * r_trial))
                if value < current:
                    u, r, current = u + delta, r_trial, value
                    damping = max(damping / 3.0, 1e-9)
                    improved = True
                    accepted += 1
                    break
                damping *= 4.0
            if not improved or np.linalg.norm(delta) < opts.min_step * voxel:
                break
        if level == opts.pyramid_levels - 1 and accepted == 0:
            step = max(h, opts.min_step * voxel)
            probes = [float(np.mean(residual(u + s * step * e) ** 2)) for e in np.eye(6) for s in (-1.0, 1.0)]
            if min(probes) < start_value - 1e-9 * max(1.0, abs(start_value)):
                raise RegistrationError(
                    "registration made no progress from the initial transform",
                    RigidTransform.from_params(u / scale),
                )
    return RigidTransform.from_params(u / scale)


def mean_displacement(a: RigidTransform, b: RigidTransform, grid: Volume3D) -> float:
    """Mean distance (in voxels of ``grid``) between a(p) and b(p) over the grid."""
    pts = grid_points(grid)
    c = grid_center(grid)
    d = (transform_points(a, pts, c) - transform_points(b, pts, c)) / np.asarray(grid.spacing)[:, None]
    return float(np.mean(np.linalg.norm(d, axis=0)))
