"""Brain-mask labels from GM/WM/CSF probability maps (SPM12-p procedure).

fuse (clipped sum) -> threshold (>= tau) -> fill enclosed holes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from brainstrip.volume import Volume3D, as_mask

# 6-connectivity
_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


class LabelGenError(ValueError):
    pass


@dataclass(frozen=True)
class LabelGenConfig:
    tau: float = 0.7
    fill_holes: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise LabelGenError(f"tau must lie in [0, 1], got {self.tau}")


def fuse_probability_maps(gm: Volume3D, wm: Volume3D, csf: Volume3D) -> Volume3D:
    for name, m in (("wm", wm), ("csf", csf)):
        if not m.same_grid(gm):
            raise LabelGenError(f"{name} map is not on the gm grid")
    for name, m in (("gm", gm), ("wm", wm), ("csf", csf)):
        if not m.is_probability():
            raise LabelGenError(f"{name} map has values outside [0, 1]")
    total = (
        np.asarray(gm.data, dtype=np.float64)
        + np.asarray(wm.data, dtype=np.float64)
        + np.asarray(csf.data, dtype=np.float64)
    )
    return gm.with_data(np.clip(total, 0.0, 1.0))


def threshold_mask(pmap: Volume3D, tau: float) -> Volume3D:
    if not 0.0 <= tau <= 1.0:
        raise LabelGenError(f"tau must lie in [0, 1], got {tau}")
    return as_mask(np.asarray(pmap.data) >= tau, pmap)


def fill_holes_3d(mask: Volume3D) -> Volume3D:
    """Set to 1 every background voxel whose 6-connected background
    component does not reach the volume border."""
    data = np.asarray(mask.data)
    if not np.all((data == 0) | (data == 1)):
        raise LabelGenError("fill_holes_3d expects a binary mask")
    background = data == 0
    labels, _ = ndimage.label(background, structure=_FACE_NEIGHBOURS)
    border = np.zeros_like(background)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    outside = np.unique(labels[border & background])
    enclosed = background & ~np.isin(labels, outside)
    return as_mask((data == 1) | enclosed, mask)


def make_spm12p_label(gm: Volume3D, wm: Volume3D, csf: Volume3D, cfg: LabelGenConfig = LabelGenConfig()) -> Volume3D:
    mask = threshold_mask(fuse_probability_maps(gm, wm, csf), cfg.tau)
    return fill_holes_3d(mask) if cfg.fill_holes else mask
