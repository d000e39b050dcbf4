"""U-Net style registration network built on the autodiff tape, plus EMA and model files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, ShapeError
from .volume import FormatError, ValidationError, Volume

MREG_MAGIC = b"MREG1"


@dataclass(frozen=True)
class ArchConfig:
    levels: int = 2
    base_channels: int = 8
    decoder_channels: int = 8
    dropout_rate: float = 0.2
    leaky_slope: float = 0.2

    def __post_init__(self):
        # stored as f32 on disk; keep the in-memory value identical
        object.__setattr__(self, "dropout_rate", float(np.float32(self.dropout_rate)))
        object.__setattr__(self, "leaky_slope", float(np.float32(self.leaky_slope)))
        if self.levels < 1:
            raise ValidationError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1 or self.decoder_channels < 1:
            raise ValidationError("channel counts must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def encoder_channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_input(self, shape):
        m = 2 ** self.levels
        if any(n % m for n in shape):
            raise ShapeError(f"input dims {tuple(shape)} must be divisible by 2**levels = {m}")


def param_shapes(arch: ArchConfig) -> dict:
    """Ordered parameter names and shapes for an architecture."""
    shapes = {}
    cin = 2
    skips = [2]
    for i in range(arch.levels):
        cout = arch.encoder_channels(i)
        shapes[f"enc{i}.weight"] = (cout, cin, 3, 3, 3)
        shapes[f"enc{i}.bias"] = (cout,)
        cin = cout
        skips.append(cout)
    # skips[-1] is the bottleneck itself, not a skip
    skips.pop()
    dec = arch.decoder_channels
    for j in range(arch.levels):
        shapes[f"dec{j}.weight"] = (dec, cin, 3, 3, 3)
        shapes[f"dec{j}.bias"] = (dec,)
        cin = dec + skips[-1 - j]
    for k in range(3):
        shapes[f"ref{k}.weight"] = (dec, cin, 3, 3, 3)
        shapes[f"ref{k}.bias"] = (dec,)
        cin = dec
    shapes["flow.weight"] = (3, cin, 3, 3, 3)
    shapes["flow.bias"] = (3,)
    return shapes


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: dict

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.arch == other.arch
                and list(self.tensors) == list(other.tensors)
                and all(self.tensors[k].dtype == other.tensors[k].dtype
                        and self.tensors[k].shape == other.tensors[k].shape
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes()
                        for k in self.tensors))


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal hidden convs, near-zero flow conv, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name == "flow.weight":
            tensors[name] = rng.normal(0.0, 1e-5, size=shape).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return ModelParams(arch, tensors)


class DropoutPlan:
    """Either ``off`` or a seeded stream of Bernoulli keep-masks, one per dropout site."""

    def __init__(self, seed=None):
        self.seed = seed
        self._rng = None if seed is None else np.random.default_rng(seed)

    @classmethod
    def off(cls):
        return cls(None)

    @classmethod
    def stochastic(cls, seed: int):
        return cls(int(seed))

    @property
    def active(self) -> bool:
        return self._rng is not None

    def mask(self, shape, rate):
        return (self._rng.random(shape) >= rate).astype(np.float64)


def _conv_block(g, h, p, name, stride, arch, plan=None):
    h = g.forward_op("conv3d", [h, p[f"{name}.weight"], p[f"{name}.bias"]], stride=stride)
    h = g.forward_op("leaky_relu", [h], slope=arch.leaky_slope)
    if plan is not None and plan.active and arch.dropout_rate > 0:
        shape = g.value(h).shape
        h = g.forward_op("dropout", [h], mask=plan.mask(shape, arch.dropout_rate),
                         p=1.0 - arch.dropout_rate)
    return h


def build_forward(g: Graph, param_nodes: dict, fixed_node: int, moving_node: int,
                  arch: ArchConfig, plan: DropoutPlan) -> int:
    """Append the network to ``g`` and return the field node (3, nz, ny, nx)."""
    fshape, mshape = g.value(fixed_node).shape, g.value(moving_node).shape
    if fshape != mshape or fshape[0] != 1:
        raise ShapeError(f"fixed {fshape} and moving {mshape} must be equal single-channel volumes")
    arch.check_input(fshape[1:])
    x = g.forward_op("concat_channels", [fixed_node, moving_node])
    skips = [x]
    h = x
    for i in range(arch.levels):
        h = _conv_block(g, h, param_nodes, f"enc{i}", 2, arch, plan)
        skips.append(h)
    skips.pop()
    for j in range(arch.levels):
        h = _conv_block(g, h, param_nodes, f"dec{j}", 1, arch, plan)
        h = g.forward_op("upsample_trilinear_2x", [h])
        h = g.forward_op("concat_channels", [h, skips[-1 - j]])
    for k in range(3):
        h = _conv_block(g, h, param_nodes, f"ref{k}", 1, arch)
    return g.forward_op("conv3d", [h, param_nodes["flow.weight"], param_nodes["flow.bias"]], stride=1)


def add_params(g: Graph, params: ModelParams, trainable=True) -> dict:
    make = g.variable if trainable else g.constant
    return {k: make(v) for k, v in params.tensors.items()}


def forward(params: ModelParams, fixed: Volume, moving: Volume, plan: DropoutPlan = None,
            dtype=np.float32):
    """Predict the displacement field; returns ``(field, graph)``.

    The graph keeps parameter leaves as variables so that callers may run
    ``graph.backward`` on a loss appended to it; ``graph.field_node`` and
    ``graph.param_nodes`` locate the relevant nodes.
    """
    plan = plan or DropoutPlan.off()
    g = Graph(dtype)
    pn = add_params(g, params)
    fn = g.constant(fixed.data)
    mn = g.constant(moving.data)
    out = build_forward(g, pn, fn, mn, params.arch, plan)
    g.field_node, g.param_nodes, g.fixed_node, g.moving_node = out, pn, fn, mn
    return Volume(g.value(out), fixed.spacing), g


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """In-place ``teacher <- alpha*teacher + (1-alpha)*student``; returns the teacher.

    ``alpha == 1`` freezes the teacher.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    if list(teacher.tensors) != list(student.tensors):
        raise ShapeError("teacher and student parameter names differ")
    for name, t in teacher.tensors.items():
        s = student.tensors[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        teacher.tensors[name] = (alpha * t + (1.0 - alpha) * s).astype(t.dtype)
    return teacher


def save_model(path, params: ModelParams) -> None:
    a = params.arch
    chunks = [MREG_MAGIC,
              struct.pack("<IIIffI", a.levels, a.base_channels, a.decoder_channels,
                          a.dropout_rate, a.leaky_slope, len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("ascii")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.asarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != MREG_MAGIC:
        raise FormatError(f"{path}: unknown magic {raw[:5]!r}")
    pos = 5

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated while reading {what}: need {pos + n} bytes, have {len(raw)}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    levels, base, dec, rate, slope, count = struct.unpack("<IIIffI", take(24, "header"))
    try:
        arch = ArchConfig(levels, base, dec, rate, slope)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    expected = param_shapes(arch)
    if count != len(expected):
        raise ValidationError(f"{path}: {count} tensors stored, architecture needs {len(expected)}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("ascii")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"tensor {name}"), dtype="<f4").reshape(dims)
        if expected.get(name) != tuple(dims):
            raise ValidationError(f"{path}: tensor {name} with shape {dims} does not fit the architecture")
        tensors[name] = data.astype(np.float32)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    if list(tensors) != list(expected):
        raise ValidationError(f"{path}: tensor names/order do not match the architecture")
    return ModelParams(arch, tensors)
