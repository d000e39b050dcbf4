"""Similarity and regularization terms, all expressed as graph ops."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ShapeError
from .volume import Volume

# (dx, dy, dz) unit offsets of the six-neighbourhood
NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass(frozen=True)
class MindConfig:
    sigma_patch: float = 0.5
    variance_eps: float = 1e-6

    def __post_init__(self):
        if self.variance_eps <= 0:
            raise ValueError(f"variance_eps must be > 0, got {self.variance_eps}")

    def kernel(self) -> np.ndarray:
        k = np.exp(-np.arange(-1, 2) ** 2 / (2.0 * self.sigma_patch ** 2))
        return k / k.sum()


def mind_graph(g: Graph, img: int, cfg: MindConfig = MindConfig()) -> int:
    """Six-channel MIND descriptor of a single-channel image node.

    Patch distances use an edge-replicated image, which keeps the descriptor
    exactly invariant to ``a*I + b`` up to the variance floor.
    """
    shape = g.value(img).shape
    if len(shape) != 4 or shape[0] != 1:
        raise ShapeError(f"mind descriptor needs a single-channel volume, got {shape}")
    nz, ny, nx = shape[1:]
    padded = g.forward_op("pad_edge", [img], width=2)
    inner = (nz + 2, ny + 2, nx + 2)
    centre = g.forward_op("crop", [padded], start=(1, 1, 1), size=inner)
    sq = []
    for dx, dy, dz in NEIGHBOURS:
        moved = g.forward_op("crop", [padded], start=(1 + dz, 1 + dy, 1 + dx), size=inner)
        sq.append(g.forward_op("square", [g.forward_op("subtract", [centre, moved])]))
    ssd = g.forward_op("concat_channels", sq)
    ssd = g.forward_op("gaussian_blur", [ssd], kernel=cfg.kernel())
    dist = g.forward_op("crop", [ssd], start=(1, 1, 1), size=(nz, ny, nx))
    local_var = g.forward_op("reduce_mean", [dist], axis=0)
    floor = g.forward_op("maximum", [g.forward_op("scale", [g.forward_op("reduce_mean", [local_var])],
                                                  factor=cfg.variance_eps),
                                     g.constant(cfg.variance_eps)])
    var = g.forward_op("maximum", [local_var, floor])
    desc = g.forward_op("exp", [g.forward_op("scale", [g.forward_op("divide_eps", [dist, var], eps=0.0)],
                                            factor=-1.0)])
    peak = g.forward_op("reduce_max", [desc], axis=0)
    return g.forward_op("divide_eps", [desc, peak], eps=0.0)


def mind_descriptor(img: Volume, cfg: MindConfig = MindConfig(), dtype=np.float64) -> Volume:
    if img.channels != 1:
        raise ShapeError(f"mind descriptor needs a single-channel volume, got {img.channels} channels")
    g = Graph(dtype)
    out = mind_graph(g, g.constant(img.data), cfg)
    return Volume(g.value(out), img.spacing)


def sim_loss(g: Graph, fixed_desc: int, warped: int, cfg: MindConfig = MindConfig(), l1=False) -> int:
    """Mean squared (or absolute) MIND difference; ``fixed_desc`` is a precomputed descriptor node."""
    wd = mind_graph(g, warped, cfg)
    if g.value(fixed_desc).shape != g.value(wd).shape:
        raise ShapeError(f"sim_loss: descriptor shapes {g.value(fixed_desc).shape} vs {g.value(wd).shape}")
    diff = g.forward_op("subtract", [fixed_desc, wd])
    diff = g.forward_op("abs" if l1 else "square", [diff])
    return g.forward_op("reduce_mean", [diff])


def sim_loss_images(g: Graph, fixed: int, warped: int, cfg: MindConfig = MindConfig(), l1=False) -> int:
    return sim_loss(g, mind_graph(g, fixed, cfg), warped, cfg, l1)


def smoothness_loss(g: Graph, field: int) -> int:
    """Mean over voxels, components and axes of squared forward differences."""
    if g.value(field).shape[0] != 3:
        raise ShapeError(f"smoothness_loss needs a 3-channel field, got {g.value(field).shape}")
    diffs = [g.forward_op("shift_diff", [field], axis=a) for a in range(3)]
    stacked = g.forward_op("concat_channels", diffs)
    return g.forward_op("reduce_mean", [g.forward_op("square", [stacked])])


def consistency_loss(g: Graph, student_warped: int, teacher_warped) -> int:
    """MSE between student and teacher warps; the teacher side never receives gradient."""
    if isinstance(teacher_warped, (int, np.integer)):
        target = g.constant(g.value(teacher_warped))
    else:
        target = g.constant(np.asarray(teacher_warped))
    if g.value(target).shape != g.value(student_warped).shape:
        raise ShapeError(f"consistency_loss: shapes {g.value(student_warped).shape} vs {g.value(target).shape}")
    diff = g.forward_op("subtract", [student_warped, target])
    return g.forward_op("reduce_mean", [g.forward_op("square", [diff])])


def total_loss(g: Graph, sim: int, smooth: int, cons: int, lambda_phi: float, lambda_c: float) -> int:
    if lambda_phi < 0 or lambda_c < 0:
        raise ValueError(f"weights must be >= 0, got {lambda_phi}, {lambda_c}")
    out = g.forward_op("add", [sim, g.forward_op("scale", [smooth], factor=float(lambda_phi))])
    return g.forward_op("add", [out, g.forward_op("scale", [cons], factor=float(lambda_c))])
