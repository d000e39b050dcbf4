"""Tape-based reverse-mode differentiation over a small, closed set of array ops.

Volumes flow through the graph as ``(channels, nz, ny, nx)`` arrays; the batch
dimension is always 1 and therefore dropped. Spatial axes are addressed as
0 = x, 1 = y, 2 = z, which map to array axes -1, -2, -3.

A graph is built op by op with :meth:`Graph.forward_op` (or the module-level
:func:`forward_op`), then :meth:`Graph.backward` fills in gradients for every
node that is reachable from the loss and depends on a variable leaf.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    needs_grad: bool
    ctx: Any = None


@dataclass
class _Op:
    forward: Callable
    backward: Callable


OPS: dict[str, _Op] = {}


def _register(kind):
    def deco(cls):
        OPS[kind] = _Op(cls.forward, cls.backward)
        return cls
    return deco


def spatial_axis(a: int, ndim: int = 4) -> int:
    if a not in (0, 1, 2):
        raise ShapeError(f"spatial axis must be 0 (x), 1 (y) or 2 (z), got {a}")
    return ndim - 1 - a


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _need_volume(kind, x, ndim=4):
    if x.ndim != ndim:
        raise ShapeError(f"{kind}: expected a {ndim}D (c, z, y, x) array, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

@_register("add")
class _Add:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _broadcast_shape("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


@_register("subtract")
class _Subtract:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _broadcast_shape("subtract", a, b)
        return a - b, None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]


@_register("scale")
class _Scale:
    @staticmethod
    def forward(vals, attrs):
        return vals[0] * attrs["factor"], None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        return [g * attrs["factor"]]


@_register("square")
class _Square:
    @staticmethod
    def forward(vals, attrs):
        return vals[0] * vals[0], None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        return [2.0 * g * vals[0]]


@_register("abs")
class _Abs:
    @staticmethod
    def forward(vals, attrs):
        return np.abs(vals[0]), None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        return [g * np.sign(vals[0])]


@_register("exp")
class _Exp:
    @staticmethod
    def forward(vals, attrs):
        return np.exp(vals[0]), None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        return [g * out]


@_register("divide_eps")
class _DivideEps:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _broadcast_shape("divide_eps", a, b)
        den = b + attrs.get("eps", 0.0)
        return a / den, den

    @staticmethod
    def backward(g, vals, out, den, attrs):
        ga = g / den
        gb = -ga * out
        return [_unbroadcast(ga, vals[0].shape), _unbroadcast(gb, vals[1].shape)]


@_register("maximum")
class _Maximum:
    """Elementwise max with broadcasting; ties send the gradient to the first input."""

    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _broadcast_shape("maximum", a, b)
        return np.maximum(a, b), None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        first = np.broadcast_to(vals[0] >= vals[1], g.shape)
        return [_unbroadcast(np.where(first, g, 0.0), vals[0].shape),
                _unbroadcast(np.where(first, 0.0, g), vals[1].shape)]


@_register("leaky_relu")
class _LeakyRelu:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        pos = x > 0
        return np.where(pos, x, x * attrs["slope"]), pos

    @staticmethod
    def backward(g, vals, out, pos, attrs):
        return [np.where(pos, g, g * attrs["slope"])]


@_register("dropout")
class _Dropout:
    """``x * mask / p`` with an externally supplied 0/1 mask and keep-probability p."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        mask = attrs["mask"]
        if mask.shape != x.shape:
            raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
        scaled = (mask / attrs["p"]).astype(x.dtype)
        return x * scaled, scaled

    @staticmethod
    def backward(g, vals, out, scaled, attrs):
        return [g * scaled]


# ---------------------------------------------------------------------------
# reductions and shape ops

@_register("reduce_mean")
class _ReduceMean:
    """Mean over everything (scalar output) or over one array axis (kept)."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        axis = attrs.get("axis")
        if axis is None:
            return np.asarray(np.mean(x, dtype=np.float64), dtype=x.dtype), None
        return np.mean(x, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype), None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        x = vals[0]
        axis = attrs.get("axis")
        n = x.size if axis is None else x.shape[axis]
        return [np.broadcast_to(g / n, x.shape).astype(x.dtype)]


@_register("reduce_max")
class _ReduceMax:
    """Max over one array axis (kept); the gradient goes to the first argmax."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        axis = attrs["axis"]
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis)
        return out, idx

    @staticmethod
    def backward(g, vals, out, idx, attrs):
        x = vals[0]
        axis = attrs["axis"]
        gx = np.zeros_like(x)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis)
        return [gx]


@_register("concat_channels")
class _Concat:
    @staticmethod
    def forward(vals, attrs):
        spatial = {v.shape[1:] for v in vals}
        if len(spatial) != 1 or any(v.ndim != 4 for v in vals):
            raise ShapeError(f"concat_channels: mismatched shapes {[v.shape for v in vals]}")
        return np.concatenate(vals, axis=0), None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        bounds = np.cumsum([0] + [v.shape[0] for v in vals])
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(vals))]


@_register("pad_edge")
class _PadEdge:
    """Replicate-pad the three spatial axes by ``width`` on both sides."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        _need_volume("pad_edge", x)
        w = attrs["width"]
        return np.pad(x, ((0, 0), (w, w), (w, w), (w, w)), mode="edge"), None

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        w = attrs["width"]
        g = g.copy()
        # fold the replicated borders back onto the edge voxels, one axis at a time
        for ax in (1, 2, 3):
            n = g.shape[ax]
            lo = [slice(None)] * 4
            hi = [slice(None)] * 4
            lo[ax], hi[ax] = slice(0, w), slice(n - w, n)
            edge_lo = [slice(None)] * 4
            edge_hi = [slice(None)] * 4
            edge_lo[ax], edge_hi[ax] = slice(w, w + 1), slice(n - w - 1, n - w)
            g[tuple(edge_lo)] += g[tuple(lo)].sum(axis=ax, keepdims=True)
            g[tuple(edge_hi)] += g[tuple(hi)].sum(axis=ax, keepdims=True)
            keep = [slice(None)] * 4
            keep[ax] = slice(w, n - w)
            g = g[tuple(keep)]
        return [g]


@_register("crop")
class _Crop:
    """Spatial sub-block; ``start`` and ``size`` are given in array order (z, y, x)."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        _need_volume("crop", x)
        start, size = attrs["start"], attrs["size"]
        for s, n, full in zip(start, size, x.shape[1:]):
            if s < 0 or n < 1 or s + n > full:
                raise ShapeError(f"crop: block start={start} size={size} outside shape {x.shape}")
        sl = (slice(None),) + tuple(slice(s, s + n) for s, n in zip(start, size))
        return x[sl].copy(), sl

    @staticmethod
    def backward(g, vals, out, sl, attrs):
        gx = np.zeros_like(vals[0])
        gx[sl] = g
        return [gx]


@_register("shift_diff")
class _ShiftDiff:
    """Forward difference ``x[i+1] - x[i]`` along a spatial axis; the last slice is 0."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        _need_volume("shift_diff", x)
        ax = spatial_axis(attrs["axis"], x.ndim)
        out = np.zeros_like(x)
        n = x.shape[ax]
        a = [slice(None)] * x.ndim
        b = [slice(None)] * x.ndim
        a[ax], b[ax] = slice(0, n - 1), slice(1, n)
        out[tuple(a)] = x[tuple(b)] - x[tuple(a)]
        return out, (tuple(a), tuple(b))

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        a, b = ctx
        gx = np.zeros_like(vals[0])
        gx[b] += g[a]
        gx[a] -= g[a]
        return [gx]


# ---------------------------------------------------------------------------
# separable linear resampling (upsampling, blur) as per-axis dense matrices

def _apply_axis_matrices(x, mats):
    """Apply ``mats[k]`` (out_n x in_n) along spatial axis k (0 = x) of a 4D array."""
    for k, m in enumerate(mats):
        ax = 3 - k
        x = np.moveaxis(np.tensordot(m, x, axes=(1, ax)), 0, ax)
    return x


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """Linear 2x upsampling with half-voxel alignment and edge clamping."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(n):
        m[2 * i, i] += 0.75
        m[2 * i, max(i - 1, 0)] += 0.25
        m[2 * i + 1, i] += 0.75
        m[2 * i + 1, min(i + 1, n - 1)] += 0.25
    return m


def blur_matrix(n: int, kernel, dtype=np.float64) -> np.ndarray:
    """Zero-padded 'same' correlation with a 1D kernel as an n x n band matrix."""
    kernel = np.asarray(kernel, dtype=np.float64)
    r = len(kernel) // 2
    m = np.zeros((n, n), dtype=dtype)
    for i in range(n):
        for t, w in enumerate(kernel):
            j = i + t - r
            if 0 <= j < n:
                m[i, j] = w
    return m


@_register("upsample_trilinear_2x")
class _Upsample:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        _need_volume("upsample_trilinear_2x", x)
        nz, ny, nx = x.shape[1:]
        mats = [upsample_matrix(n, x.dtype) for n in (nx, ny, nz)]
        return _apply_axis_matrices(x, mats), mats

    @staticmethod
    def backward(g, vals, out, mats, attrs):
        return [_apply_axis_matrices(g, [m.T for m in mats])]


@_register("gaussian_blur")
class _Blur:
    """Separable blur along all three spatial axes, zero padding, same size."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        _need_volume("gaussian_blur", x)
        kernel = attrs["kernel"]
        if len(kernel) % 2 != 1:
            raise ShapeError(f"gaussian_blur: kernel length must be odd, got {len(kernel)}")
        nz, ny, nx = x.shape[1:]
        mats = [blur_matrix(n, kernel, x.dtype) for n in (nx, ny, nz)]
        return _apply_axis_matrices(x, mats), mats

    @staticmethod
    def backward(g, vals, out, mats, attrs):
        return [_apply_axis_matrices(g, [m.T for m in mats])]


# ---------------------------------------------------------------------------
# convolution

@_register("conv3d")
class _Conv3d:
    """3x3x3 cross-correlation, zero padding 1, stride 1 or 2. Inputs: x, weight, bias."""

    @staticmethod
    def forward(vals, attrs):
        x, w, b = vals
        s = attrs.get("stride", 1)
        if s not in (1, 2):
            raise ShapeError(f"conv3d: stride must be 1 or 2, got {s}")
        _need_volume("conv3d", x)
        if w.ndim != 5 or w.shape[2:] != (3, 3, 3) or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d: input {x.shape}, weight {w.shape}, bias {b.shape} do not match")
        cin = x.shape[0]
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))[:, ::s, ::s, ::s]
        out_sp = win.shape[1:4]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(cin * 27, -1)
        out = (w.reshape(w.shape[0], -1) @ cols).reshape((w.shape[0],) + out_sp)
        out += b[:, None, None, None]
        return out, (cols, xp.shape, out_sp)

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        x, w, b = vals
        cols, pshape, out_sp = ctx
        s = attrs.get("stride", 1)
        cout, cin = w.shape[:2]
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        dcols = (w.reshape(cout, -1).T @ g2).reshape((cin, 3, 3, 3) + out_sp)
        gxp = np.zeros(pshape, dtype=x.dtype)
        oz, oy, ox = out_sp
        for kz in range(3):
            for ky in range(3):
                for kx in range(3):
                    gxp[:, kz:kz + s * (oz - 1) + 1:s,
                        ky:ky + s * (oy - 1) + 1:s,
                        kx:kx + s * (ox - 1) + 1:s] += dcols[:, kz, ky, kx]
        return [gxp[:, 1:-1, 1:-1, 1:-1], gw, gb]


# ---------------------------------------------------------------------------
# trilinear pull-warping

def _warp_setup(field, spatial):
    """Corner indices and fractional weights for sampling at ``grid + field`` (border clamp)."""
    nz, ny, nx = spatial
    grids = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    corners = []
    for comp, (grid, n) in enumerate(zip(grids[::-1], (nx, ny, nz))):
        raw = grid + field[comp].astype(np.float64)
        p = np.clip(raw, 0.0, n - 1)
        i0 = np.minimum(np.floor(p).astype(np.intp), max(n - 2, 0))
        f = p - i0
        inside = (raw >= 0.0) & (raw <= n - 1)
        corners.append((i0, f, inside))
    return corners


def _warp_forward(src, field):
    nz, ny, nx = src.shape[1:]
    (x0, fx, _), (y0, fy, _), (z0, fz, _) = cx = _warp_setup(field, (nz, ny, nx))
    flat = src.reshape(src.shape[0], -1)
    base = (z0 * ny + y0) * nx + x0
    out = np.zeros(src.shape, dtype=np.float64)
    wts = []
    for dz in (0, 1):
        wz = fz if dz else 1.0 - fz
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                idx = base + (dz * ny + dy) * nx + dx
                w = wz * wy * wx
                out += w * flat[:, idx]
                wts.append((dz, dy, dx, idx))
    return out.astype(src.dtype), (cx, wts)


@_register("warp_trilinear")
class _Warp:
    """Sample ``src`` at ``grid + field`` with trilinear weights; field channel c moves spatial axis c."""

    @staticmethod
    def forward(vals, attrs):
        src, field = vals
        _need_volume("warp_trilinear", src)
        if field.ndim != 4 or field.shape[0] != 3 or field.shape[1:] != src.shape[1:]:
            raise ShapeError(f"warp_trilinear: source {src.shape} and field {field.shape} do not match")
        return _warp_forward(src, field)

    @staticmethod
    def backward(g, vals, out, ctx, attrs):
        src, field = vals
        (x0, fx, inx), (y0, fy, iny), (z0, fz, inz) = ctx[0]
        corner_list = ctx[1]
        flat = src.reshape(src.shape[0], -1)
        g64 = g.astype(np.float64)
        need_src = attrs.get("_need", (True, True))[0]
        need_field = attrs.get("_need", (True, True))[1]
        gsrc = np.zeros(flat.shape, dtype=np.float64) if need_src else None
        gfx = np.zeros(fx.shape)
        gfy = np.zeros(fy.shape)
        gfz = np.zeros(fz.shape)
        for dz, dy, dx, idx in corner_list:
            wz = fz if dz else 1.0 - fz
            wy = fy if dy else 1.0 - fy
            wx = fx if dx else 1.0 - fx
            if need_src:
                w = (wz * wy * wx).ravel()
                for c in range(flat.shape[0]):
                    gsrc[c] += np.bincount(idx.ravel(), weights=w * g64[c].ravel(), minlength=flat.shape[1])
            if need_field:
                gv = (g64 * flat[:, idx]).sum(axis=0)
                sz, sy, sx = (1.0 if dz else -1.0), (1.0 if dy else -1.0), (1.0 if dx else -1.0)
                gfx += gv * (wz * wy * sx)
                gfy += gv * (wz * sy * wx)
                gfz += gv * (sz * wy * wx)
        gs = gsrc.reshape(src.shape).astype(src.dtype) if need_src else None
        gf = None
        if need_field:
            gf = np.stack([gfx * inx, gfy * iny, gfz * inz]).astype(field.dtype)
        return [gs, gf]


# ---------------------------------------------------------------------------
# graph

class Graph:
    """Append-only tape of nodes; ``dtype`` fixes the working precision."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"graph dtype must be float32 or float64, got {self.dtype}")
        self.nodes: list[Node] = []
        self.grads: list = []

    def _append(self, node):
        self.nodes.append(node)
        self.grads.append(None)
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        return self._append(Node("leaf", (), {}, np.asarray(value, dtype=self.dtype), False))

    def variable(self, value) -> int:
        return self._append(Node("leaf", (), {}, np.asarray(value, dtype=self.dtype), True))

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def grad(self, node: int):
        return self.grads[node]

    def forward_op(self, kind: str, inputs, **attrs) -> int:
        if kind not in OPS:
            raise ValueError(f"unknown op kind {kind!r}")
        inputs = tuple(int(i) for i in inputs)
        if any(i < 0 or i >= len(self.nodes) for i in inputs):
            raise ValueError(f"{kind}: input ids {inputs} not in graph")
        vals = [self.nodes[i].value for i in inputs]
        out, ctx = OPS[kind].forward(vals, attrs)
        out = np.asarray(out, dtype=self.dtype)
        needs = any(self.nodes[i].needs_grad for i in inputs)
        return self._append(Node(kind, inputs, attrs, out, needs, ctx))

    def backward(self, loss: int) -> None:
        """Reverse sweep from a scalar node; gradients accumulate across fan-out."""
        root = self.nodes[loss]
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, node {loss} has shape {root.value.shape}")
        self.grads = [None] * len(self.nodes)
        self.grads[loss] = np.ones_like(root.value)
        for i in range(loss, -1, -1):
            g = self.grads[i]
            node = self.nodes[i]
            if g is None or node.kind == "leaf" or not node.needs_grad:
                continue
            vals = [self.nodes[j].value for j in node.inputs]
            need = tuple(self.nodes[j].needs_grad for j in node.inputs)
            attrs = node.attrs
            if node.kind == "warp_trilinear":
                attrs = dict(attrs, _need=need)
            in_grads = OPS[node.kind].backward(g, vals, node.value, node.ctx, attrs)
            for j, gj, nj in zip(node.inputs, in_grads, need):
                if not nj or gj is None:
                    continue
                gj = np.asarray(gj, dtype=self.dtype).reshape(self.nodes[j].value.shape)
                if self.grads[j] is None:
                    self.grads[j] = gj.copy()
                else:
                    self.grads[j] = self.grads[j] + gj


def regime(graph: Graph) -> bytes:
    """Digest of every branch taken by the piecewise ops in ``graph``.

    Two evaluations with the same digest lie on the same smooth piece: the
    same leaky_relu/abs signs, maximum winners, reduce_max arg-maxima and warp
    sampling cells (including border clamping).
    """
    h = hashlib.sha1()
    for node in graph.nodes:
        vals = [graph.nodes[i].value for i in node.inputs]
        if node.kind in ("leaky_relu", "abs"):
            h.update(np.packbits(vals[0] > 0).tobytes())
        elif node.kind == "maximum":
            h.update(np.packbits(np.broadcast_to(vals[0] >= vals[1], node.value.shape)).tobytes())
        elif node.kind == "reduce_max":
            h.update(np.argmax(vals[0], axis=node.attrs.get("axis")).tobytes())
        elif node.kind == "warp_trilinear":
            for i0, _, inside in node.ctx[0]:
                h.update(i0.tobytes())
                h.update(np.packbits(inside).tobytes())
    return h.digest()


def forward_op(graph: Graph, kind: str, inputs, attrs=None) -> int:
    return graph.forward_op(kind, inputs, **(attrs or {}))


def backward_graph(graph: Graph, loss_node: int) -> None:
    graph.backward(loss_node)


# ---------------------------------------------------------------------------
# finite-difference verification

def check_gradients(build, arrays, wrt=None, seed=0, max_samples=100, skip_kinks=False):
    """Max relative error between analytic and central-difference gradients.

    ``build(graph, leaf_ids) -> loss_node`` constructs a scalar loss from leaves
    created for ``arrays`` (float64). ``wrt`` lists the indices of arrays to
    differentiate (default all). At most ``max_samples`` elements per array are
    probed, chosen at random.

    With ``skip_kinks`` an element is only scored if both probes ``x +- h``
    stay on the same smooth piece as ``x`` (see :func:`regime`); straddled
    elements are replaced by further random draws while any remain.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    def run(arrs, grad=False):
        g = Graph(np.float64)
        ids = [g.variable(a) if k in wrt else g.constant(a) for k, a in enumerate(arrs)]
        loss = build(g, ids)
        if grad:
            g.backward(loss)
            return [g.grad(ids[k]) for k in wrt], regime(g)
        return float(g.value(loss)), (regime(g) if skip_kinks else None)

    analytic, base = run(arrays, grad=True)
    worst = 0.0
    for k, ga in zip(wrt, analytic):
        a = arrays[k]
        if ga is None:
            ga = np.zeros_like(a)
        order = rng.permutation(a.size) if a.size > max_samples else np.arange(a.size)
        scored = 0
        for fi in order:
            if scored == max_samples:
                break
            pos = np.unravel_index(fi, a.shape)
            x0 = a[pos]
            h = 1e-4 * max(1.0, abs(x0))
            a[pos] = x0 + h
            fp, rp = run(arrays)
            a[pos] = x0 - h
            fm, rm = run(arrays)
            a[pos] = x0
            if skip_kinks and not rp == rm == base:
                continue
            scored += 1
            num = (fp - fm) / (2 * h)
            an = float(ga[pos])
            err = abs(an - num) / max(1e-8, abs(an) + abs(num))
            worst = max(worst, err)
    return worst


def _projected(g, out, rng):
    """Scalar probe ``mean((out + c)^2)`` with a random constant offset c."""
    shape = g.value(out).shape
    c = g.constant(rng.normal(size=shape))
    return g.forward_op("reduce_mean", [g.forward_op("square", [g.forward_op("add", [out, c])])])


def _grad_case(kind, shapes, rng):
    """Random inputs, attrs and differentiable-input indices for one op kind."""
    vol = tuple(shapes[0]) if shapes else (2, 5, 6, 4)
    r = rng.normal
    if kind == "conv3d":
        cout = shapes[1][0] if shapes and len(shapes) > 1 else 3
        w = r(size=(cout, vol[0], 3, 3, 3)) * 0.3
        return [r(size=vol), w, r(size=cout)], {"stride": 2}, None
    if kind == "leaky_relu":
        x = r(size=vol)
        x = np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-12) * 0.1, x)
        return [x], {"slope": 0.2}, None
    if kind == "dropout":
        mask = (rng.random(vol) > 0.3).astype(np.float64)
        return [r(size=vol)], {"mask": mask, "p": 0.7}, None
    if kind in ("add", "subtract"):
        return [r(size=vol), r(size=vol)], {}, None
    if kind == "maximum":
        a = r(size=vol)
        b = a + np.where(rng.random(vol) > 0.5, 0.5, -0.5) + 0.1 * r(size=vol)
        return [a, b], {}, None
    if kind == "divide_eps":
        return [r(size=vol), rng.uniform(0.5, 2.0, size=vol)], {"eps": 0.01}, None
    if kind in ("scale",):
        return [r(size=vol)], {"factor": -1.7}, None
    if kind in ("exp", "square"):
        return [r(size=vol) * 0.5], {}, None
    if kind == "abs":
        x = r(size=vol)
        return [np.where(np.abs(x) < 0.05, x + 0.2, x)], {}, None
    if kind == "reduce_mean":
        return [r(size=vol)], {}, None
    if kind == "reduce_max":
        x = r(size=vol)
        return [x], {"axis": 0}, None
    if kind == "concat_channels":
        other = (1,) + vol[1:]
        return [r(size=vol), r(size=other)], {}, None
    if kind == "pad_edge":
        return [r(size=vol)], {"width": 2}, None
    if kind == "crop":
        return [r(size=vol)], {"start": (1, 1, 0), "size": (vol[1] - 2, vol[2] - 3, vol[3] - 1)}, None
    if kind == "shift_diff":
        return [r(size=vol)], {"axis": int(rng.integers(3))}, None
    if kind == "upsample_trilinear_2x":
        return [r(size=vol)], {}, None
    if kind == "gaussian_blur":
        k = np.exp(-np.arange(-1, 2) ** 2 / 0.5)
        return [r(size=vol)], {"kernel": k / k.sum()}, None
    if kind == "warp_trilinear":
        src = r(size=vol)
        fld = rng.uniform(-1.5, 1.5, size=(3,) + vol[1:])
        # keep sampling points away from integer coordinates
        frac = fld - np.round(fld)
        fld = np.where(np.abs(frac) < 0.1, fld + 0.25, fld)
        return [src, fld], {}, None
    raise ValueError(f"no gradient case for op kind {kind!r}")


def grad_check(kind: str, shapes=None, seed: int = 0, max_samples: int = 100) -> float:
    """Max relative gradient error of one op kind on random inputs (64-bit)."""
    rng = np.random.default_rng(seed)
    arrays, attrs, wrt = _grad_case(kind, shapes, rng)
    probe_rng_seed = int(rng.integers(2**31))

    def build(g, ids):
        out = g.forward_op(kind, ids, **attrs)
        return _projected(g, out, np.random.default_rng(probe_rng_seed))

    return check_gradients(build, arrays, wrt=wrt, seed=seed, max_samples=max_samples)
