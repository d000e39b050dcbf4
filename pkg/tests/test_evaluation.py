import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtreg.evaluation import MetricError, asd, dice, evaluate_registration, surface
from mtreg.synth import FieldSpec, PhantomSpec, gen_pair
from mtreg.volume import LabelVolume
from mtreg.warp import zero_field


def brute_dice(a, b, label):
    ma = [v == label for v in a.ravel()]
    mb = [v == label for v in b.ravel()]
    inter = sum(x and y for x, y in zip(ma, mb))
    total = sum(ma) + sum(mb)
    return 1.0 if total == 0 else 2 * inter / total


def brute_surface(mask):
    nz, ny, nx = mask.shape
    pts = []
    for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
        if not mask[z, y, x]:
            continue
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            zz, yy, xx = z + dz, y + dy, x + dx
            if not (0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx) or not mask[zz, yy, xx]:
                pts.append((z, y, x))
                break
    return np.array(pts, dtype=float)


def brute_asd(a, b, spacing=(1.0, 1.0, 1.0)):
    scale = np.array(spacing[::-1])
    pa, pb = brute_surface(a) * scale, brute_surface(b) * scale
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(pa) + len(pb))


def random_masks(seed, n=12):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n, n)) < rng.uniform(0.05, 0.5)
    b = rng.random((n, n, n)) < rng.uniform(0.05, 0.5)
    a[0, 0, 0] = b[-1, -1, -1] = True
    return a, b


def test_dice_examples():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros_like(a)
    a[:2, :2, :2] = 1
    assert dice(LabelVolume(a), LabelVolume(a), 1) == 1.0
    b[2:, 2:, 2:] = 1
    assert dice(LabelVolume(a), LabelVolume(b), 1) == 0.0
    c = np.zeros_like(a)
    c[1:3, :2, :2] = 1
    assert dice(LabelVolume(a), LabelVolume(c), 1) == 0.5
    assert dice(LabelVolume(a), LabelVolume(a), 7) == 1.0


def test_asd_examples():
    a = np.zeros((5, 5, 5), np.uint8)
    b = np.zeros_like(a)
    a[2, 2, 0] = 1
    b[2, 2, 3] = 1
    assert asd(LabelVolume(a), LabelVolume(b), 1) == 3.0
    assert asd(LabelVolume(a), LabelVolume(a), 1) == 0.0
    assert asd(LabelVolume(a), LabelVolume(b), 1, spacing=(2.0, 1.0, 1.0)) == 6.0
    with pytest.raises(MetricError, match="label 2"):
        asd(LabelVolume(a), LabelVolume(b), 2)


def test_dims_mismatch():
    with pytest.raises(MetricError):
        dice(LabelVolume(np.zeros((3, 3, 3))), LabelVolume(np.zeros((3, 3, 4))), 1)


@pytest.mark.parametrize("seed", range(8))
def test_metric_oracles(seed):
    a, b = random_masks(seed)
    la, lb = LabelVolume(a.astype(np.uint8)), LabelVolume(b.astype(np.uint8))
    assert dice(la, lb, 1) == brute_dice(la.data, lb.data, 1)
    assert set(map(tuple, np.argwhere(surface(a)).astype(float))) == set(map(tuple, brute_surface(a)))
    spacing = (1.0, 1.5, 2.0)
    assert asd(la, lb, 1, spacing) == pytest.approx(brute_asd(a, b, spacing), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_symmetry(seed):
    a, b = random_masks(seed, n=6)
    la, lb = LabelVolume(a.astype(np.uint8)), LabelVolume(b.astype(np.uint8))
    assert dice(la, lb, 1) == dice(lb, la, 1)
    assert asd(la, lb, 1) == asd(lb, la, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_dice_drops_when_overlap_removed(seed):
    a, b = random_masks(seed, n=6)
    both = np.argwhere(a & b)
    before = dice(LabelVolume(a.astype(np.uint8)), LabelVolume(b.astype(np.uint8)), 1)
    if len(both):
        a[tuple(both[0])] = False
    after = dice(LabelVolume(a.astype(np.uint8)), LabelVolume(b.astype(np.uint8)), 1)
    assert after <= before


def test_identity_report():
    seg = LabelVolume(np.random.default_rng(0).integers(0, 3, (8, 8, 8)))
    rep = evaluate_registration(zero_field((8, 8, 8)), seg, seg)
    assert rep.labels == [1, 2]
    assert all(v == 1.0 for v in rep.dice.values())
    assert all(v == 0.0 for v in rep.asd_mm.values())
    assert rep.folding_pct == 0.0 and rep.jac_std == 0.0
    doc = json.loads(rep.to_json())
    assert set(doc) == {"labels", "dice", "asd_mm", "folding_pct", "jac_std"}


def test_zero_field_passthrough_and_gt_field():
    moving, fixed, mseg, fseg, gt = gen_pair(PhantomSpec(seed=7), FieldSpec(seed=7))
    rep = evaluate_registration(zero_field(mseg.shape), mseg, fseg)
    for k in rep.labels:
        assert rep.dice[k] == dice(mseg, fseg, k)
        assert rep.asd_mm[k] == asd(mseg, fseg, k)
    # pulling the moving labels through the generating field reproduces the fixed labels
    rep_gt = evaluate_registration(gt, mseg, fseg)
    assert min(rep_gt.dice.values()) >= 0.9
    assert rep_gt.folding_pct == 0.0
