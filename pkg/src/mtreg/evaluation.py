"""Overlap, surface-distance and Jacobian metrics for a registration result."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume
from .warp import jacobian_det, jacobian_stats, warp_nearest


class MetricError(ValueError):
    pass


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    if a.shape != b.shape:
        raise MetricError(f"mask dims differ: {a.shape} vs {b.shape}")
    ma = a.data == label
    mb = b.data == label
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / (na + nb)


_SIX = ndimage.generate_binary_structure(3, 1)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a 6-neighbour outside it (the volume border counts as outside)."""
    eroded = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~eroded


def asd(a: LabelVolume, b: LabelVolume, label: int, spacing=None) -> float:
    """Symmetric average surface distance in physical units."""
    if a.shape != b.shape:
        raise MetricError(f"mask dims differ: {a.shape} vs {b.shape}")
    ma = a.data == label
    mb = b.data == label
    if not ma.any() or not mb.any():
        raise MetricError(f"label {label} is absent from {'first' if not ma.any() else 'second'} mask")
    sx, sy, sz = spacing if spacing is not None else a.spacing
    sampling = (sz, sy, sx)
    sa, sb = surface(ma), surface(mb)
    # distance from every voxel to the nearest surface voxel of the other mask
    da = ndimage.distance_transform_edt(~sb, sampling=sampling)[sa]
    db = ndimage.distance_transform_edt(~sa, sampling=sampling)[sb]
    return float((da.sum() + db.sum()) / (da.size + db.size))


@dataclass
class EvalReport:
    labels: list
    dice: dict
    asd_mm: dict
    folding_pct: float
    jac_std: float

    def to_json(self) -> str:
        return json.dumps({
            "labels": self.labels,
            "dice": {str(k): v for k, v in self.dice.items()},
            "asd_mm": {str(k): v for k, v in self.asd_mm.items()},
            "folding_pct": self.folding_pct,
            "jac_std": self.jac_std,
        }, indent=2)

    def mean_dice(self) -> float:
        return float(np.mean([self.dice[k] for k in self.labels]))


def evaluate_registration(field: Volume, moving_seg: LabelVolume, fixed_seg: LabelVolume,
                          labels=None) -> EvalReport:
    if labels is None:
        labels = sorted(set(moving_seg.labels()) | set(fixed_seg.labels()))
    warped = warp_nearest(moving_seg, field)
    folding, jstd = jacobian_stats(jacobian_det(field))
    return EvalReport(
        labels=[int(l) for l in labels],
        dice={int(l): dice(warped, fixed_seg, l) for l in labels},
        asd_mm={int(l): asd(warped, fixed_seg, l, fixed_seg.spacing) for l in labels},
        folding_pct=100.0 * folding,
        jac_std=jstd,
    )
