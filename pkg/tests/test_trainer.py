import math

import numpy as np
import pytest

from mtreg.regnet import ArchConfig, ema_update, init_params
from mtreg.trainer import (CSV_COLUMNS, NonFiniteLoss, TrainConfig, TrainState, _seed, adam_step, train,
                           train_step)
from mtreg.uncertainty import mc_sample
from mtreg.volume import ValidationError, Volume


def small_pair(seed=0, n=8):
    rng = np.random.default_rng(seed)
    fixed = Volume(rng.random((1, n, n, n)).astype(np.float32))
    moving = Volume(np.roll(fixed.data, 1, axis=3))
    return fixed, moving


def oracle_lambda(stack, eps, k, tau):
    n = stack.shape[0]
    flat = stack.astype(np.float64).reshape(n, -1)
    over = 0
    for j in range(flat.shape[1]):
        col = [float(v) for v in flat[:, j]]
        mu = sum(col) / n
        sd = math.sqrt(sum((v - mu) ** 2 for v in col) / (n - 1))
        over += sd / (abs(mu) + eps) > tau
    return k * over / flat.shape[1]


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(steps=0)
    with pytest.raises(ValidationError):
        TrainConfig(alpha_ema=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(mode="BOGUS")
    with pytest.raises(ValidationError, match="unknown config keys: nope"):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ValidationError, match="unknown arch keys"):
        TrainConfig.from_dict({"arch": {"depth": 3}})
    cfg = TrainConfig.from_dict({"steps": 3, "arch": {"dropout_rate": 0.1}})
    assert cfg.dropout_rate == 0.1 and cfg.arch.dropout_rate == pytest.approx(0.1)


def test_adam_examples():
    p = {"w": np.zeros(3)}
    m, v = {"w": np.zeros(3)}, {"w": np.zeros(3)}
    adam_step(p, {"w": np.zeros(3)}, m, v, 1e-4, 0.9, 0.999, 1e-8, 1)
    assert not p["w"].any()
    p = {"w": np.zeros(1)}
    adam_step(p, {"w": np.ones(1)}, {"w": np.zeros(1)}, {"w": np.zeros(1)}, 1e-4, 0.9, 0.999, 1e-8, 1)
    assert p["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.ones(2)}, {"w": np.zeros(1)}, {"w": np.zeros(1)}, 1e-4, 0.9, 0.999, 1e-8, 1)


def test_adam_quadratic_bowl():
    p = {"w": np.array([3.0, -2.0])}
    m, v = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    for t in range(1, 2001):
        adam_step(p, {"w": 2 * p["w"]}, m, v, 0.05, 0.9, 0.999, 1e-8, t)
    assert np.abs(p["w"]).max() < 1e-2


def test_no_dropout_collapse():
    fixed, moving = small_pair()
    cfg = TrainConfig(steps=3, dropout_rate=0.0, mode="AS_ATC")
    _, log = train(cfg, [(fixed, moving)])
    for rec in log:
        assert rec.lambda_phi == 0.0 and rec.lambda_c == 0.0
        assert rec.loss_total == rec.loss_sim


def test_ema_after_one_step():
    fixed, moving = small_pair()
    cfg = TrainConfig(steps=1)
    state = TrainState.fresh(init_params(cfg.arch, 0))
    t0 = state.teacher.copy()
    train_step(state, fixed, moving, cfg)
    for k, t in state.teacher.tensors.items():
        expect = (0.99 * t0.tensors[k] + 0.01 * state.student.tensors[k]).astype(np.float32)
        np.testing.assert_array_equal(t, expect)


def test_frozen_teacher():
    t = init_params(ArchConfig(), 0)
    before = t.copy()
    ema_update(t, init_params(ArchConfig(), 1), 1.0)
    assert t == before


def test_lambda_matches_oracle():
    fixed, moving = small_pair(1)
    cfg = TrainConfig(steps=1, seed=3)
    state = TrainState.fresh(init_params(cfg.arch, 3))
    samples = mc_sample(state.teacher, fixed, moving, cfg.n_mc, _seed(cfg.seed, 1, 0x4D43))
    rec = train_step(state, fixed, moving, cfg)
    assert rec.lambda_phi == pytest.approx(oracle_lambda(samples.fields, 0.01, 5.0, 0.1), abs=1e-12)
    assert rec.lambda_c == pytest.approx(oracle_lambda(samples.warped, 0.01, 1.0, 0.01), abs=1e-12)


@pytest.mark.parametrize("mode, lam_c", [("FIXED", 0.0), ("AS", 0.0), ("S_TC", 0.5), ("AS_TC", 0.5)])
def test_mode_contracts(mode, lam_c):
    fixed, moving = small_pair()
    _, log = train(TrainConfig(steps=2, mode=mode), [(fixed, moving)])
    assert all(r.lambda_c == lam_c for r in log)
    if mode == "FIXED":
        assert all(r.lambda_phi == 3.0 for r in log)
    if mode == "S_TC":
        assert all(r.lambda_phi == 3.0 for r in log)


def test_reproducible_and_logged():
    fixed, moving = small_pair()
    seen = []
    p1, log1 = train(TrainConfig(steps=2), [(fixed, moving)], on_step=seen.append)
    p2, log2 = train(TrainConfig(steps=2), [(fixed, moving)])
    assert p1 == p2
    assert [r.row() for r in log1] == [r.row() for r in log2]
    assert seen == log1
    assert len(log1[0].row()) == len(CSV_COLUMNS)
    for r in log1:
        assert min(r.loss_sim, r.loss_smooth, r.loss_cons, r.grad_norm) >= 0
        assert 0 <= r.lambda_phi <= 5 and 0 <= r.lambda_c <= 1


def test_empty_pairs_rejected():
    with pytest.raises(ValidationError):
        train(TrainConfig(steps=1), [])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reported():
    fixed, moving = small_pair()
    state = TrainState.fresh(init_params(ArchConfig(), 0))
    state.student.tensors["flow.bias"][:] = np.inf
    with pytest.raises(NonFiniteLoss) as info:
        train_step(state, fixed, moving, TrainConfig(steps=1, mode="FIXED"))
    assert info.value.record.step == 1
    assert info.value.component.startswith("loss")
