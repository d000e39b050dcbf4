"""Command-line entry points: synth, train, register, evaluate, uncertainty.

Exit codes: 0 success, 1 runtime/data error, 2 usage/validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .evaluation import MetricError, evaluate_registration
from .regnet import forward, load_model
from .synth import MIN_SIZE, FieldSpec, GenerationError, PhantomSpec, gen_pair
from .trainer import CSV_COLUMNS, NonFiniteLoss, TrainConfig, train
from .uncertainty import adaptive_weights, mc_sample, uncertainty_maps
from .volume import FormatError, LabelVolume, ValidationError, Volume, read_mvol, write_mvol
from .warp import warp_trilinear

log = logging.getLogger("mtreg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _read(path, kind):
    try:
        obj = read_mvol(path)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from exc
    if not isinstance(obj, kind):
        raise DataError(f"{path}: expected a {'label' if kind is LabelVolume else 'float'} volume")
    return obj


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    try:
        return TrainConfig.from_dict(raw)
    except (ValidationError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greyscale, min-max scaled to 0..255 (constant images are black)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo) * 255.0
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    rows, cols = data.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + data.tobytes())


def cmd_synth(args):
    if args.size < MIN_SIZE:
        raise UsageError(f"--size must be >= {MIN_SIZE}, got {args.size}")
    if args.pairs < 1:
        raise UsageError(f"--pairs must be >= 1, got {args.pairs}")
    if args.amplitude < 0:
        raise UsageError("--amplitude must be >= 0")
    if not 1 <= args.blobs <= 255:
        raise UsageError("--blobs must be in [1, 255]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.pairs):
        seed = args.seed + i
        size = (args.size,) * 3
        pspec = PhantomSpec(size=size, num_blobs=args.blobs, seed=seed, noise_sigma=args.noise)
        fspec = FieldSpec(control_spacing=args.control_spacing, amplitude=args.amplitude, seed=seed)
        moving, fixed, mseg, fseg, gt = gen_pair(pspec, fspec)
        write_mvol(out / f"{i}_moving.mvol", moving)
        write_mvol(out / f"{i}_fixed.mvol", fixed)
        write_mvol(out / f"{i}_moving.mseg", mseg)
        write_mvol(out / f"{i}_fixed.mseg", fseg)
        write_mvol(out / f"{i}_gt.mvol", gt)
    print(f"wrote {args.pairs} pair(s) to {out}")
    return 0


def _find_pairs(data_dir):
    data = Path(data_dir)
    if not data.is_dir():
        raise DataError(f"{data}: not a directory")
    pairs = []
    for fixed_path in sorted(data.glob("*_fixed.mvol"), key=lambda p: p.name):
        stem = fixed_path.name[: -len("_fixed.mvol")]
        moving_path = data / f"{stem}_moving.mvol"
        if not moving_path.exists():
            raise DataError(f"{moving_path}: missing partner of {fixed_path.name}")
        pairs.append((_read(fixed_path, Volume), _read(moving_path, Volume)))
    if not pairs:
        raise DataError(f"{data}: no *_fixed.mvol / *_moving.mvol pairs found")
    return pairs


def cmd_train(args):
    cfg = _load_config(args.config)
    pairs = _find_pairs(args.data)
    for f, m in pairs:
        try:
            cfg.arch.check_input(f.shape)
        except ShapeError as exc:
            raise UsageError(str(exc)) from exc
    from .regnet import save_model

    with open(args.log, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)

        def on_step(rec):
            writer.writerow([repr(v) if isinstance(v, float) else v for v in rec.row()])
            fh.flush()

        try:
            model, history = train(cfg, pairs, on_step=on_step)
        except NonFiniteLoss as exc:
            raise DataError(f"training aborted: {exc}") from exc
    save_model(args.out, model)
    last = history[-1]
    print(f"trained {len(history)} steps, final loss {last.loss_total:.6f}; model -> {args.out}")
    return 0


def cmd_register(args):
    try:
        params = load_model(args.model)
    except (OSError, FormatError, ValidationError) as exc:
        raise DataError(str(exc)) from exc
    moving = _read(args.moving, Volume)
    fixed = _read(args.fixed, Volume)
    if moving.shape != fixed.shape:
        raise DataError(f"moving dims {moving.shape} != fixed dims {fixed.shape}")
    try:
        field, _ = forward(params, fixed, moving)
    except ShapeError as exc:
        raise DataError(f"input dims {fixed.shape} incompatible with model: {exc}") from exc
    write_mvol(args.out_field, field)
    write_mvol(args.out_warped, warp_trilinear(moving, field))
    print(f"field -> {args.out_field}, warped -> {args.out_warped}")
    return 0


def cmd_evaluate(args):
    field = _read(args.field, Volume)
    mseg = _read(args.moving_seg, LabelVolume)
    fseg = _read(args.fixed_seg, LabelVolume)
    if field.channels != 3:
        raise DataError(f"{args.field}: field must have 3 channels, has {field.channels}")
    if not (field.shape == mseg.shape == fseg.shape):
        raise DataError(f"dims differ: field {field.shape}, moving seg {mseg.shape}, fixed seg {fseg.shape}")
    if mseg.labels() != fseg.labels():
        raise DataError(f"label sets differ: moving {mseg.labels()} vs fixed {fseg.labels()}")
    try:
        report = evaluate_registration(field, mseg, fseg, fseg.labels())
    except MetricError as exc:
        raise DataError(str(exc)) from exc
    Path(args.report).write_text(report.to_json())
    for lab in report.labels:
        print(f"label {lab}: dice {report.dice[lab]:.4f} asd {report.asd_mm[lab]:.4f} mm")
    print(f"folding {report.folding_pct:.4f}% jac_std {report.jac_std:.4f}")
    return 0


def cmd_uncertainty(args):
    if args.passes < 2:
        raise UsageError(f"--passes must be >= 2, got {args.passes}")
    cfg = _load_config(args.config)
    try:
        params = load_model(args.model)
    except (OSError, FormatError, ValidationError) as exc:
        raise DataError(str(exc)) from exc
    moving = _read(args.moving, Volume)
    fixed = _read(args.fixed, Volume)
    try:
        samples = mc_sample(params, fixed, moving, args.passes, args.seed)
    except ShapeError as exc:
        raise DataError(str(exc)) from exc
    maps = uncertainty_maps(samples, cfg.eps_phi, cfg.eps_app)
    lam_phi, lam_c = adaptive_weights(maps, cfg.k1, cfg.k2, cfg.tau1, cfg.tau2)
    prefix = args.out_prefix
    u_phi, u_app = maps.volumes(fixed.spacing)
    write_mvol(f"{prefix}_uphi.mvol", u_phi)
    write_mvol(f"{prefix}_uapp.mvol", u_app)
    mid = fixed.nz // 2
    for c, axis in enumerate("xyz"):
        write_pgm(f"{prefix}_uphi_{axis}.pgm", maps.u_phi[c, mid])
    write_pgm(f"{prefix}_uapp.pgm", maps.u_app[0, mid])
    print(f"lambda_phi {lam_phi!r}")
    print(f"lambda_c {lam_c!r}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="mtreg", description="Mean-teacher deformable registration with uncertainty-guided weighting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic multimodal pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--size", type=int, default=24)
    s.add_argument("--pairs", type=int, default=1)
    s.add_argument("--amplitude", type=float, default=1.5)
    s.add_argument("--blobs", type=int, default=3)
    s.add_argument("--noise", type=float, default=PhantomSpec.noise_sigma)
    s.add_argument("--control-spacing", type=int, default=FieldSpec.control_spacing)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a student network")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="predict a field with a trained student")
    r.add_argument("--model", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--out-field", required=True)
    r.add_argument("--out-warped", required=True)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="Dice / ASD / Jacobian report")
    e.add_argument("--field", required=True)
    e.add_argument("--moving-seg", required=True)
    e.add_argument("--fixed-seg", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_evaluate)

    u = sub.add_parser("uncertainty", help="export Monte Carlo dropout uncertainty maps")
    u.add_argument("--model", required=True)
    u.add_argument("--moving", required=True)
    u.add_argument("--fixed", required=True)
    u.add_argument("--passes", type=int, default=6)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out-prefix", required=True)
    u.add_argument("--config")
    u.set_defaults(func=cmd_uncertainty)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mtreg: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mtreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, GenerationError, ValidationError, FormatError, OSError) as exc:
        print(f"mtreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
