"""Synthetic multimodal phantoms with known smooth deformations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy import ndimage

from .autodiff import _apply_axis_matrices
from .volume import LabelVolume, ValidationError, Volume, normalize_intensity
from .warp import folding_fraction, jacobian_det, warp_nearest, warp_trilinear


class GenerationError(RuntimeError):
    pass


MIN_SIZE = 8


def _check_size(size):
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < MIN_SIZE:
        raise ValidationError(f"size components must be >= {MIN_SIZE}, got {size}")
    return size


@dataclass
class PhantomSpec:
    size: tuple = (24, 24, 24)  # (nx, ny, nz)
    num_blobs: int = 3
    seed: int = 7
    noise_sigma: float = 0.02
    texture: float = 0.0  # optional smooth tissue texture; off by default
    texture_sigma: float = 1.0

    def __post_init__(self):
        self.size = _check_size(self.size)
        if self.texture < 0 or self.texture_sigma <= 0:
            raise ValidationError("texture must be >= 0 and texture_sigma > 0")
        if not 1 <= self.num_blobs <= 255:
            raise ValidationError(f"num_blobs must be in [1, 255], got {self.num_blobs}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class FieldSpec:
    control_spacing: int = 8
    amplitude: float = 1.5
    max_tries: int = 20
    seed: int = 7

    def __post_init__(self):
        if self.control_spacing < 2:
            raise ValidationError(f"control_spacing must be >= 2, got {self.control_spacing}")
        if self.amplitude < 0:
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.max_tries < 1:
            raise ValidationError(f"max_tries must be >= 1, got {self.max_tries}")


def _place_ellipsoids(shape, num, rng, max_attempts=1000):
    nz, ny, nx = shape
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    labels = np.zeros(shape, dtype=np.uint8)
    lo = max(1.5, min(shape) / 8)
    hi = max(lo + 0.5, min(shape) / 4.5)
    placed = 0
    attempts = 0
    while placed < num:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(
                f"could not place {num} non-overlapping ellipsoids in {max_attempts} attempts (placed {placed})")
        radii = rng.uniform(lo, hi, size=3)  # (rz, ry, rx)
        center = [rng.uniform(r + 1, n - r - 2) if n - r - 2 > r + 1 else (n - 1) / 2
                  for r, n in zip(radii, shape)]
        inside = (((zz - center[0]) / radii[0]) ** 2
                  + ((yy - center[1]) / radii[1]) ** 2
                  + ((xx - center[2]) / radii[2]) ** 2) <= 1.0
        # keep a one-voxel gap so blobs never touch
        grown = inside.copy()
        for ax in range(3):
            grown |= np.roll(inside, 1, axis=ax) | np.roll(inside, -1, axis=ax)
        if inside.sum() < 4 or (labels[grown] != 0).any():
            continue
        placed += 1
        labels[inside] = placed
    return labels


def _bias_field(shape, rng, strength=0.08):
    nz, ny, nx = shape
    zz, yy, xx = np.meshgrid(np.linspace(0, 1, nz), np.linspace(0, 1, ny), np.linspace(0, 1, nx),
                             indexing="ij")
    bias = np.zeros(shape)
    for _ in range(3):
        k = rng.uniform(0.5, 1.5, size=3)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        bias += (np.cos(np.pi * k[0] * zz + ph[0]) * np.cos(np.pi * k[1] * yy + ph[1])
                 * np.cos(np.pi * k[2] * xx + ph[2]))
    return strength * bias / 3


def intensity_maps(num_blobs, rng):
    """Label -> intensity tables (index 0 = background) for the two modalities."""
    levels = np.linspace(0.2, 1.0, num_blobs + 1)
    map_a = np.empty(num_blobs + 1)
    map_a[0] = 0.05
    map_a[1:] = rng.permutation(levels[1:]) if num_blobs > 1 else levels[1:]
    # second modality: organs reshuffled, then the whole table inverted
    map_b = map_a.copy()
    if num_blobs > 1:
        map_b[1:] = np.roll(map_a[1:], 1)
    map_b = 1.0 - map_b
    return map_a, map_b


def _texture(shape, sigma, rng):
    t = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    return t / t.std()


def gen_phantom(spec: PhantomSpec):
    """Return (labels, intensity_a, intensity_b) for one phantom.

    Each modality maps labels to its own intensity table, then adds a smooth
    tissue texture whose per-label contrast (and sign) is modality specific,
    a low-frequency bias field and Gaussian noise.
    """
    nx, ny, nz = spec.size
    shape = (nz, ny, nx)
    rng = np.random.default_rng(spec.seed)
    labels = _place_ellipsoids(shape, spec.num_blobs, rng)
    map_a, map_b = intensity_maps(spec.num_blobs, rng)
    tex = _texture(shape, spec.texture_sigma, rng)
    gain_a = rng.uniform(0.5, 1.0, spec.num_blobs + 1)
    gain_b = rng.uniform(0.5, 1.0, spec.num_blobs + 1) * rng.choice([-1.0, 1.0], spec.num_blobs + 1)
    images = []
    for table, gain in ((map_a, gain_a), (map_b, gain_b)):
        img = table[labels] + spec.texture * gain[labels] * tex + _bias_field(shape, rng)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=shape)
        images.append(normalize_intensity(Volume(img[None].astype(np.float32))))
    return LabelVolume(labels), images[0], images[1]


def _linear_upsample_matrix(n, spacing):
    """Linear interpolation from control points at 0, s, 2s, ... onto 0..n-1."""
    m = int(np.ceil((n - 1) / spacing)) + 1
    mat = np.zeros((n, m))
    for i in range(n):
        t = i / spacing
        j = min(int(np.floor(t)), m - 2)
        f = t - j
        mat[i, j] += 1 - f
        mat[i, j + 1] += f
    return mat


def gen_smooth_field(spec: FieldSpec, size) -> Volume:
    """Folding-free random displacement field; size is (nx, ny, nz)."""
    nx, ny, nz = _check_size(size)
    mats = [_linear_upsample_matrix(n, spec.control_spacing) for n in (nx, ny, nz)]
    rng = np.random.default_rng(spec.seed)
    ctrl = rng.normal(0.0, 1.0, size=(3, mats[2].shape[1], mats[1].shape[1], mats[0].shape[1]))
    dense = _apply_axis_matrices(ctrl, mats) * spec.amplitude
    for _ in range(spec.max_tries):
        field = Volume(dense.astype(np.float32))
        if folding_fraction(jacobian_det(field)) == 0.0:
            return field
        dense = dense * 0.8
    raise GenerationError(f"field still folds after {spec.max_tries} rescaling attempts")


def gen_pair(pspec: PhantomSpec, fspec: FieldSpec):
    """(moving, fixed, moving_seg, fixed_seg, gt_field) for one synthetic pair."""
    labels, img_a, img_b = gen_phantom(pspec)
    gt = gen_smooth_field(fspec, pspec.size)
    fixed = warp_trilinear(img_b, gt)
    fixed_seg = warp_nearest(labels, gt)
    return img_a, fixed, labels, fixed_seg, gt
