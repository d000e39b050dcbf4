"""Mean-teacher training loop with uncertainty-guided regularization weights."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .autodiff import Graph
from .regnet import ArchConfig, DropoutPlan, ModelParams, add_params, build_forward, ema_update, init_params
from .uncertainty import adaptive_weights, fraction_above, mc_sample, uncertainty_maps
from .volume import ValidationError, Volume

log = logging.getLogger(__name__)

MODES = ("AS_ATC", "AS", "S_TC", "AS_TC", "FIXED")
ADAPTIVE_MODES = ("AS_ATC", "AS", "AS_TC")


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.9
    lr_decay_every: int = 0  # 0 keeps the learning rate constant
    alpha_ema: float = 0.99
    n_mc: int = 6
    k1: float = 5.0
    k2: float = 1.0
    tau1: float = 0.10
    tau2: float = 0.01
    eps_phi: float = 0.01
    eps_app: float = 0.01
    dropout_rate: float = 0.2
    mode: str = "AS_ATC"
    fixed_lambda: float = 3.0  # FIXED mode weight
    fixed_lambda_phi: float = 3.0  # S_TC
    fixed_lambda_c: float = 0.5  # S_TC, AS_TC
    student_dropout: bool = True
    teacher_target: str = "deterministic"  # or "mc_mean"
    mind_l1: bool = False
    fast_mind: bool = False
    dtype: str = "float32"
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        # the architecture carries the dropout rate used in every forward pass
        if self.arch.dropout_rate != np.float32(self.dropout_rate):
            self.arch = dataclasses.replace(self.arch, dropout_rate=self.dropout_rate)
        self.validate()

    def validate(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha_ema < 1.0:
            raise ValidationError(f"alpha_ema must be in [0, 1), got {self.alpha_ema}")
        if self.n_mc < 2:
            raise ValidationError(f"n_mc must be >= 2, got {self.n_mc}")
        nonneg = ("lr", "adam_eps", "lr_decay", "lr_decay_every", "k1", "k2", "tau1", "tau2",
                  "dropout_rate", "fixed_lambda", "fixed_lambda_phi", "fixed_lambda_c")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must be in [0, 1)")
        if self.eps_phi <= 0 or self.eps_app <= 0:
            raise ValidationError("eps_phi and eps_app must be > 0")
        if self.teacher_target not in ("deterministic", "mc_mean"):
            raise ValidationError(f"teacher_target must be 'deterministic' or 'mc_mean', got {self.teacher_target!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a JSON-style dict; unknown keys are rejected."""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "arch" in d:
            arch = d["arch"]
            if not isinstance(arch, dict):
                raise ValidationError("arch must be an object")
            akeys = {f.name for f in dataclasses.fields(ArchConfig)}
            bad = sorted(set(arch) - akeys)
            if bad:
                raise ValidationError(f"unknown arch keys: {', '.join(bad)}")
            if "dropout_rate" in arch and "dropout_rate" not in d:
                d["dropout_rate"] = arch["dropout_rate"]
            d["arch"] = ArchConfig(**arch)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    def fixed_weights(self):
        """Constant (lambda_phi, lambda_c) for the non-adaptive parts of the current mode."""
        return {
            "AS_ATC": (None, None),
            "AS": (None, 0.0),
            "AS_TC": (None, self.fixed_lambda_c),
            "S_TC": (self.fixed_lambda_phi, self.fixed_lambda_c),
            "FIXED": (self.fixed_lambda, 0.0),
        }[self.mode]


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        zeros = {k: np.zeros(t.shape) for k, t in params.tensors.items()}
        return cls(params, params.copy(), zeros, {k: z.copy() for k, z in zeros.items()}, 0)


CSV_COLUMNS = ("step", "lambda_phi", "lambda_c", "loss_total", "loss_sim", "loss_smooth", "loss_cons",
               "frac_over_tau1", "frac_over_tau2", "grad_norm")


@dataclass
class StepRecord:
    step: int
    lambda_phi: float
    lambda_c: float
    loss_total: float
    loss_sim: float
    loss_smooth: float
    loss_cons: float
    frac_over_tau1: float
    frac_over_tau2: float
    grad_norm: float

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


class NonFiniteLoss(RuntimeError):
    def __init__(self, record: StepRecord, component: str):
        super().__init__(f"non-finite {component} at step {record.step}")
        self.record = record
        self.component = component


def adam_step(params: dict, grads: dict, m: dict, v: dict, lr, beta1, beta2, eps, t: int) -> dict:
    """Bias-corrected Adam update of ``params`` in place (moments in float64)."""
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        step = lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
        params[name] = (p.astype(np.float64) - step).astype(p.dtype)
    return params


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def fixed_descriptor(fixed: Volume, cfg: TrainConfig) -> np.ndarray:
    g = Graph(cfg.dtype)
    return g.value(losses.mind_graph(g, g.constant(fixed.data)))


def train_step(state: TrainState, fixed: Volume, moving: Volume, cfg: TrainConfig,
               fixed_desc: np.ndarray = None, moving_desc: np.ndarray = None) -> StepRecord:
    s = state.step + 1
    arch = state.student.arch
    lam_phi, lam_c = cfg.fixed_weights()
    frac1 = frac2 = 0.0

    samples = None
    if cfg.mode in ADAPTIVE_MODES or cfg.teacher_target == "mc_mean":
        samples = mc_sample(state.teacher, fixed, moving, cfg.n_mc, _seed(cfg.seed, s, 0x4D43), cfg.dtype)
    if cfg.mode in ADAPTIVE_MODES:
        maps = uncertainty_maps(samples, cfg.eps_phi, cfg.eps_app)
        a_phi, a_c = adaptive_weights(maps, cfg.k1, cfg.k2, cfg.tau1, cfg.tau2)
        frac1 = fraction_above(maps.u_phi, cfg.tau1)
        frac2 = fraction_above(maps.u_app, cfg.tau2)
        lam_phi = a_phi if lam_phi is None else lam_phi
        lam_c = a_c if lam_c is None else lam_c

    # teacher consistency target, held constant
    if cfg.teacher_target == "mc_mean":
        teacher_warped = samples.warped.astype(np.float64).mean(axis=0)
    else:
        tg = Graph(cfg.dtype)
        tp = add_params(tg, state.teacher, trainable=False)
        tm = tg.constant(moving.data)
        tf = build_forward(tg, tp, tg.constant(fixed.data), tm, arch, DropoutPlan.off())
        teacher_warped = tg.value(tg.forward_op("warp_trilinear", [tm, tf]))

    g = Graph(cfg.dtype)
    pn = add_params(g, state.student)
    mn = g.constant(moving.data)
    plan = DropoutPlan.stochastic(_seed(cfg.seed, s, 0x5)) if cfg.student_dropout else DropoutPlan.off()
    fld = build_forward(g, pn, g.constant(fixed.data), mn, arch, plan)
    warped = g.forward_op("warp_trilinear", [mn, fld])
    if fixed_desc is None:
        fixed_desc = fixed_descriptor(fixed, cfg)
    fd = g.constant(fixed_desc)
    if cfg.fast_mind:
        if moving_desc is None:
            moving_desc = fixed_descriptor(moving, cfg)
        wd = g.forward_op("warp_trilinear", [g.constant(moving_desc), fld])
        diff = g.forward_op("subtract", [fd, wd])
        sim = g.forward_op("reduce_mean", [g.forward_op("abs" if cfg.mind_l1 else "square", [diff])])
    else:
        sim = losses.sim_loss(g, fd, warped, l1=cfg.mind_l1)
    smooth = losses.smoothness_loss(g, fld)
    cons = losses.consistency_loss(g, warped, teacher_warped)
    total = losses.total_loss(g, sim, smooth, cons, lam_phi, lam_c)

    rec = StepRecord(s, float(lam_phi), float(lam_c), float(g.value(total)), float(g.value(sim)),
                     float(g.value(smooth)), float(g.value(cons)), frac1, frac2, float("nan"))
    for name in ("loss_sim", "loss_smooth", "loss_cons", "loss_total"):
        if not np.isfinite(getattr(rec, name)):
            raise NonFiniteLoss(rec, name)

    g.backward(total)
    grads = {k: g.grad(n) if g.grad(n) is not None else np.zeros_like(g.value(n)) for k, n in pn.items()}
    rec.grad_norm = float(np.sqrt(sum(np.sum(gr.astype(np.float64) ** 2) for gr in grads.values())))
    if not np.isfinite(rec.grad_norm):
        raise NonFiniteLoss(rec, "grad_norm")

    lr = cfg.lr
    if cfg.lr_decay_every:
        lr *= cfg.lr_decay ** ((s - 1) // cfg.lr_decay_every)
    adam_step(state.student.tensors, grads, state.m, state.v, lr,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, s)
    ema_update(state.teacher, state.student, cfg.alpha_ema)
    state.step = s
    return rec


def train(cfg: TrainConfig, pairs, on_step=None, params: ModelParams = None):
    """Train a fresh student (teacher starts as its copy); returns ``(student, log)``.

    ``pairs`` is a sequence of ``(fixed, moving)`` volumes, cycled in order.
    ``on_step`` receives each :class:`StepRecord` as soon as it is produced.
    """
    cfg.validate()
    if not pairs:
        raise ValidationError("training needs at least one (fixed, moving) pair")
    for fixed, moving in pairs:
        if fixed.shape != moving.shape:
            raise ValidationError(f"pair dims differ: {fixed.shape} vs {moving.shape}")
        cfg.arch.check_input(fixed.shape)
    state = TrainState.fresh(params.copy() if params is not None else init_params(cfg.arch, cfg.seed))
    descs = [fixed_descriptor(f, cfg) for f, _ in pairs]
    mdescs = [fixed_descriptor(m, cfg) for _, m in pairs] if cfg.fast_mind else [None] * len(pairs)
    history = []
    for s in range(cfg.steps):
        k = s % len(pairs)
        fixed, moving = pairs[k]
        rec = train_step(state, fixed, moving, cfg, descs[k], mdescs[k])
        history.append(rec)
        if on_step is not None:
            on_step(rec)
        if rec.step % 50 == 0:
            log.info("step %d loss %.5f sim %.5f lphi %.3f lc %.3f", rec.step, rec.loss_total,
                     rec.loss_sim, rec.lambda_phi, rec.lambda_c)
    return state.student, history
