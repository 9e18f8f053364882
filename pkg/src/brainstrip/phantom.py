"""Synthetic two-channel head phantoms with known brain masks.

Geometry is a brain ellipsoid (WM core, GM rim, CSF gap, two ventricles)
inside a skull shell, two eyes in front of and below the brain (they break
the head's symmetry, which registration needs), and an optional tumor whose
necrotic core has zero tissue probability. The core is what breaks plain
thresholding of the fused tissue maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from brainstrip.nifti import write_nifti
from brainstrip.volume import Volume3D

# tissue -> (pseudo-T1Gd mean, pseudo-FLAIR mean)
DEFAULT_CONTRAST = {
    "background": (0.02, 0.02),
    "skull": (0.85, 0.35),
    "csf": (0.20, 0.10),
    "gm": (0.50, 0.65),
    "wm": (0.75, 0.50),
    "tumor": (1.00, 0.90),
    "necrosis": (0.05, 0.05),
    "eye": (0.30, 0.20),
}

# normalized ellipsoid radius where WM gives way to GM, and GM to CSF
WM_EDGE = 0.60
CSF_EDGE = 0.85
TRANSITION = 0.05


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class TumorSpec:
    center: tuple[float, float, float]
    radius: float
    necrotic_core_radius: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    semi_axes: tuple[float, float, float] = (0.32, 0.36, 0.30)
    center: Optional[tuple[float, float, float]] = None
    skull_thickness: float = 3.0
    tumor: Optional[TumorSpec] = None
    noise_sigma: float = 0.03
    bias_field_amplitude: float = 0.1
    ventricles: bool = True
    eyes: bool = True
    contrast: dict = field(default_factory=lambda: dict(DEFAULT_CONTRAST))

    def __post_init__(self):
        if any(not 0 < a <= 0.5 for a in self.semi_axes):
            raise PhantomError(f"semi-axes must lie in (0, 0.5], got {self.semi_axes}")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")
        if self.skull_thickness < 0:
            raise PhantomError("skull_thickness must be >= 0")
        t = self.tumor
        if t is not None and not 0 <= t.necrotic_core_radius < t.radius:
            raise PhantomError("necrotic core must be smaller than the tumor")
        missing = set(DEFAULT_CONTRAST) - set(self.contrast)
        if missing:
            raise PhantomError(f"contrast table lacks {sorted(missing)}")

    @property
    def center_vox(self) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=np.float64)
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    @property
    def axes_vox(self) -> np.ndarray:
        return np.asarray(self.semi_axes) * np.asarray(self.dims)

    def to_record(self) -> dict[str, str]:
        fmt = lambda v: ",".join(repr(float(x)) for x in v)  # noqa: E731
        rec = {
            "dims": ",".join(str(d) for d in self.dims),
            "semi_axes": fmt(self.semi_axes),
            "center": fmt(self.center_vox),
            "skull_thickness": repr(float(self.skull_thickness)),
            "noise_sigma": repr(float(self.noise_sigma)),
            "bias_field_amplitude": repr(float(self.bias_field_amplitude)),
            "ventricles": str(int(self.ventricles)),
            "eyes": str(int(self.eyes)),
        }
        if self.tumor is not None:
            rec["tumor_center"] = fmt(self.tumor.center)
            rec["tumor_radius"] = repr(float(self.tumor.radius))
            rec["necrotic_core_radius"] = repr(float(self.tumor.necrotic_core_radius))
        for tissue, (t1, fl) in sorted(self.contrast.items()):
            rec[f"contrast.{tissue}"] = f"{t1!r},{fl!r}"
        return rec


@dataclass(frozen=True)
class PhantomCase:
    case_id: str
    seed: int
    t1gd: Volume3D
    flair: Volume3D
    truth_mask: Volume3D
    gm: Volume3D
    wm: Volume3D
    csf: Volume3D
    spec: Optional[PhantomSpec] = None


def _ramp(x: np.ndarray) -> np.ndarray:
    """0 -> 1 linear ramp over [-TRANSITION/2, TRANSITION/2]."""
    return np.clip(x / TRANSITION + 0.5, 0.0, 1.0)


def _grid(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _ellipsoid_radius(coords, center, axes) -> np.ndarray:
    return np.sqrt(sum(((c - c0) / a) ** 2 for c, c0, a in zip(coords, center, axes)))


def _sphere_distance(coords, center) -> np.ndarray:
    return np.sqrt(sum((c - c0) ** 2 for c, c0 in zip(coords, center)))


def brain_ellipsoid(spec: PhantomSpec) -> np.ndarray:
    """Voxel centers inside the brain ellipsoid."""
    return _ellipsoid_radius(_grid(spec.dims), spec.center_vox, spec.axes_vox) <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int, case_id: str = "case") -> PhantomCase:
    coords = _grid(spec.dims)
    center = spec.center_vox
    axes = spec.axes_vox
    r = _ellipsoid_radius(coords, center, axes)
    brain = r <= 1.0
    skull = ~brain & (_ellipsoid_radius(coords, center, axes + spec.skull_thickness) <= 1.0)

    tumor = np.zeros(spec.dims, dtype=bool)
    core = np.zeros(spec.dims, dtype=bool)
    if spec.tumor is not None:
        d = _sphere_distance(coords, spec.tumor.center)
        tumor = d <= spec.tumor.radius
        core = d <= spec.tumor.necrotic_core_radius
        if np.any(tumor & ~brain):
            raise PhantomError("tumor is not contained in the brain")
        if not np.any(tumor):
            raise PhantomError("tumor covers no voxel")

    wm = np.where(brain, _ramp(WM_EDGE - r), 0.0)
    csf = np.where(brain, _ramp(r - CSF_EDGE), 0.0)
    if spec.ventricles:
        for side in (-1.0, 1.0):
            v_center = center + axes * np.array([0.16 * side, -0.05, 0.08])
            ventricle = brain & (_ellipsoid_radius(coords, v_center, axes * np.array([0.07, 0.30, 0.12])) <= 1.0)
            wm[ventricle] = 0.0
            csf[ventricle] = 1.0
    gm = np.where(brain, 1.0 - wm - csf, 0.0)
    eyes = np.zeros(spec.dims, dtype=bool)
    if spec.eyes:
        eye_radius = 0.16 * axes.min()
        for side in (-1.0, 1.0):
            e_center = center + axes * np.array([0.38 * side, 0.88, -0.45])
            eyes |= _sphere_distance(coords, e_center) <= eye_radius
        eyes &= ~brain
    for m in (gm, wm, csf):
        m[core] = 0.0

    rng = np.random.default_rng(seed)
    # smooth multiplicative bias: exp of a random linear + quadratic form
    unit = [(c - c0) / (n / 2.0) for c, c0, n in zip(coords, center, spec.dims)]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    curvature = rng.uniform(-0.5, 0.5, size=3)
    log_field = sum(direction[k] * unit[k] + curvature[k] * unit[k] ** 2 for k in range(3))
    bias = np.exp(spec.bias_field_amplitude * log_field)

    channels = []
    for ch in range(2):
        mean = lambda tissue: spec.contrast[tissue][ch]  # noqa: E731
        img = np.full(spec.dims, mean("background"))
        img[skull] = mean("skull")
        img[eyes] = mean("eye")
        img[brain] = (gm * mean("gm") + wm * mean("wm") + csf * mean("csf"))[brain]
        img[tumor] = mean("tumor")
        img[core] = mean("necrosis")
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        if spec.bias_field_amplitude != 0:
            img = img * bias
        channels.append(img)

    vol = lambda a: Volume3D(a)  # noqa: E731
    return PhantomCase(
        case_id=case_id,
        seed=seed,
        t1gd=vol(channels[0]),
        flair=vol(channels[1]),
        truth_mask=vol(brain.astype(np.uint8)),
        gm=vol(gm),
        wm=vol(wm),
        csf=vol(csf),
        spec=spec,
    )


def random_spec(
    rng: np.random.Generator,
    dims=(48, 48, 48),
    tumor_probability: float = 0.8,
    require_necrosis: bool = False,
    **overrides,
) -> PhantomSpec:
    """Draw a plausible phantom geometry: jittered head shape and position,
    and (with ``tumor_probability``) a tumor with a necrotic core."""
    dims = tuple(int(d) for d in dims)
    base = np.array([0.32, 0.36, 0.30])
    semi = tuple(float(a) for a in base * rng.uniform(0.92, 1.08, size=3))
    center = (np.asarray(dims) - 1.0) / 2.0 + rng.uniform(-1.5, 1.5, size=3) * np.asarray(dims) / 48.0
    skull = float(rng.uniform(2.0, 3.5)) * min(dims) / 48.0
    spec = PhantomSpec(
        dims=dims,
        semi_axes=semi,
        center=tuple(float(c) for c in center),
        skull_thickness=skull,
        noise_sigma=float(rng.uniform(0.02, 0.04)),
        bias_field_amplitude=float(rng.uniform(0.0, 0.2)),
    )
    axes = spec.axes_vox
    wants_tumor = require_necrosis or rng.uniform() < tumor_probability
    if wants_tumor and axes.min() >= 10:
        scale = axes.min() / 15.0
        radius = float(rng.uniform(5.5, 7.0)) * scale
        core = float(rng.uniform(3.8, 4.6)) * scale
        mask = brain_ellipsoid(spec)
        for _ in range(100):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            reach = 1.0 - (radius + 1.0) / axes.min()
            pos = spec.center_vox + direction * axes * rng.uniform(0.0, max(reach, 0.0))
            tumor = TumorSpec(tuple(float(p) for p in pos), radius, core)
            d = _sphere_distance(_grid(dims), tumor.center)
            if not np.any((d <= radius) & ~mask):
                spec = replace(spec, tumor=tumor)
                break
    return replace(spec, **overrides) if overrides else spec


def generate_cohort(count: int, seed: int, dims=(48, 48, 48), **kwargs) -> list[PhantomCase]:
    """``count`` phantoms; case ``i`` depends only on (seed, i)."""
    cases = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        spec = random_spec(rng, dims, **kwargs)
        case_seed = int(rng.integers(0, 2**31 - 1))
        cases.append(generate_phantom(spec, case_seed, case_id=f"case_{i:03d}"))
    return cases


CASE_FILES = ("t1gd", "flair", "truth", "gm", "wm", "csf")


def write_case(case: PhantomCase, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    vols = dict(
        t1gd=case.t1gd, flair=case.flair, truth=case.truth_mask, gm=case.gm, wm=case.wm, csf=case.csf
    )
    for name in CASE_FILES:
        write_nifti(vols[name], out / f"{name}.nii")
    record = {"case_id": case.case_id, "seed": str(case.seed)}
    if case.spec is not None:
        record.update(case.spec.to_record())
    (out / "spec.txt").write_text("".join(f"{k}={v}\n" for k, v in record.items()))
    return out
