"""Pull-warping of images and label maps, and Jacobian analysis of displacement fields.

A displacement field is a 3-channel :class:`Volume` whose channel c holds the
displacement, in voxels, along spatial axis c (0 = x, 1 = y, 2 = z), with
``warped(p) = source(p + u(p))``.
"""
import numpy as np

from .autodiff import ShapeError, _warp_forward
from .volume import LabelVolume, Volume


def _check_field(field, spatial):
    if not isinstance(field, Volume) or field.channels != 3:
        raise ShapeError("displacement field must be a 3-channel Volume")
    if field.shape != tuple(spatial):
        raise ShapeError(f"field spatial dims {field.shape} != image dims {tuple(spatial)}")


def zero_field(shape, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.zeros((3,) + tuple(shape), dtype=np.float32), spacing)


def warp_trilinear(source: Volume, field: Volume) -> Volume:
    _check_field(field, source.shape)
    out, _ = _warp_forward(source.data, field.data)
    return Volume(out, source.spacing)


def warp_nearest(labels: LabelVolume, field: Volume) -> LabelVolume:
    """Nearest-neighbour pull-warp; rounds half away from zero, clamps to the grid."""
    _check_field(field, labels.shape)
    nz, ny, nx = labels.shape
    gz, gy, gx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    idx = []
    for grid, comp, n in ((gz, 2, nz), (gy, 1, ny), (gx, 0, nx)):
        p = grid + field.data[comp].astype(np.float64)
        r = np.sign(p) * np.floor(np.abs(p) + 0.5)
        idx.append(np.clip(r, 0, n - 1).astype(np.intp))
    return LabelVolume(labels.data[tuple(idx)], labels.spacing)


def jacobian_det(field: Volume) -> Volume:
    """det(I + grad u) per voxel, forward differences with replicate far boundary."""
    if field.channels != 3:
        raise ShapeError("jacobian_det expects a 3-channel displacement field")
    if min(field.shape) < 2:
        raise ShapeError(f"jacobian_det needs at least 2 voxels per axis, got {field.shape}")
    u = field.data.astype(np.float64)
    # jac[i][j] = d u_i / d x_j  (i, j spatial axes, 0 = x)
    jac = [[None] * 3 for _ in range(3)]
    for j in range(3):
        ax = 3 - j
        d = np.zeros_like(u)
        n = u.shape[ax]
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[ax], hi[ax] = slice(0, n - 1), slice(1, n)
        d[tuple(lo)] = u[tuple(hi)] - u[tuple(lo)]
        for i in range(3):
            jac[i][j] = d[i] + (1.0 if i == j else 0.0)
    a, b, c = jac
    det = (a[0] * (b[1] * c[2] - b[2] * c[1])
           - a[1] * (b[0] * c[2] - b[2] * c[0])
           + a[2] * (b[0] * c[1] - b[1] * c[0]))
    return Volume(det[None].astype(np.float32), field.spacing)


def jacobian_stats(detvol: Volume):
    """(fraction of voxels with det <= 0, population std of det)."""
    if detvol.channels != 1:
        raise ShapeError("jacobian_stats expects a single-channel volume")
    d = detvol.data.astype(np.float64).ravel()
    return float(np.count_nonzero(d <= 0) / d.size), float(np.std(d))


def folding_fraction(detvol: Volume) -> float:
    return jacobian_stats(detvol)[0]
