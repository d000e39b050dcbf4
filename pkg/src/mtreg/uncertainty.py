"""Monte Carlo dropout on the teacher and the uncertainty-driven regularization weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Graph, ShapeError
from .regnet import DropoutPlan, ModelParams, add_params, build_forward
from .volume import Volume


@dataclass
class McSamples:
    fields: np.ndarray  # (N, 3, nz, ny, nx)
    warped: np.ndarray  # (N, 1, nz, ny, nx)

    def __post_init__(self):
        self.fields = np.asarray(self.fields)
        self.warped = np.asarray(self.warped)
        if self.fields.ndim != 5 or self.fields.shape[1] != 3:
            raise ShapeError(f"fields must be (N, 3, nz, ny, nx), got {self.fields.shape}")
        if self.warped.ndim != 5 or self.warped.shape[1] != 1:
            raise ShapeError(f"warped must be (N, 1, nz, ny, nx), got {self.warped.shape}")
        if self.fields.shape[0] != self.warped.shape[0] or self.fields.shape[2:] != self.warped.shape[2:]:
            raise ShapeError(f"fields {self.fields.shape} and warped {self.warped.shape} disagree")

    @property
    def n(self) -> int:
        return self.fields.shape[0]


@dataclass
class UncertaintyMaps:
    u_phi: np.ndarray
    u_app: np.ndarray
    mu_phi: np.ndarray
    mu_app: np.ndarray
    sigma_phi: np.ndarray
    sigma_app: np.ndarray

    def volumes(self, spacing=(1.0, 1.0, 1.0)):
        """``(u_phi, u_app)`` as float32 volumes for export."""
        return Volume(self.u_phi.astype(np.float32), spacing), Volume(self.u_app.astype(np.float32), spacing)


def mc_sample(teacher: ModelParams, fixed: Volume, moving: Volume, n: int = 6, base_seed: int = 0,
              dtype=np.float32) -> McSamples:
    """N stochastic teacher passes; pass i draws its dropout masks from seed ``base_seed + i``."""
    if n < 2:
        raise ContractError(f"need at least 2 passes, got {n}")
    fields, warped = [], []
    for i in range(n):
        g = Graph(dtype)
        pn = add_params(g, teacher, trainable=False)
        mn = g.constant(moving.data)
        fld = build_forward(g, pn, g.constant(fixed.data), mn, teacher.arch,
                            DropoutPlan.stochastic(base_seed + i))
        w = g.forward_op("warp_trilinear", [mn, fld])
        fields.append(g.value(fld))
        warped.append(g.value(w))
    return McSamples(np.stack(fields), np.stack(warped))


def _ratio_map(stack, eps):
    x = stack.astype(np.float64)
    # deviations from the first sample: identical samples give sigma == 0 exactly
    d = x - x[0]
    d_mu = d.mean(axis=0)
    sigma = np.sqrt(((d - d_mu) ** 2).sum(axis=0) / (x.shape[0] - 1))
    mu = x[0] + d_mu
    return sigma / (np.abs(mu) + eps), mu, sigma


def uncertainty_maps(samples: McSamples, eps_phi: float = 0.01, eps_app: float = 0.01) -> UncertaintyMaps:
    """Per-voxel ``sigma / (|mu| + eps)`` with the N-1 sample standard deviation."""
    if samples.n < 2:
        raise ContractError(f"standard deviation needs N >= 2 samples, got {samples.n}")
    if eps_phi <= 0 or eps_app <= 0:
        raise ValueError("eps_phi and eps_app must be > 0")
    u_phi, mu_phi, s_phi = _ratio_map(samples.fields, eps_phi)
    u_app, mu_app, s_app = _ratio_map(samples.warped, eps_app)
    return UncertaintyMaps(u_phi, u_app, mu_phi, mu_app, s_phi, s_app)


def fraction_above(u: np.ndarray, tau: float) -> float:
    return float(np.count_nonzero(u > tau) / u.size)


def adaptive_weights(maps: UncertaintyMaps, k1: float = 5.0, k2: float = 1.0,
                     tau1: float = 0.10, tau2: float = 0.01):
    """(lambda_phi, lambda_c): k times the fraction of map elements strictly above tau."""
    if min(k1, k2, tau1, tau2) < 0:
        raise ValueError("k1, k2, tau1, tau2 must be >= 0")
    return k1 * fraction_above(maps.u_phi, tau1), k2 * fraction_above(maps.u_app, tau2)
