import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polardepth.errors import DimensionError, DomainError, EmptyAggregationError
from polardepth.evaluation import (
    eigen_metrics,
    format_table,
    median_scale,
    protocol_masks,
    reports_to_csv,
    sky_accuracy,
)


def brute_metrics(pred, gt, valid):
    """Pixel-by-pixel scalar aggregation used as the oracle."""
    n = 0
    abs_rel = sq_rel = sq = sq_log = 0.0
    hits = [0, 0, 0]
    for p, g, m in zip(pred.ravel().tolist(), gt.ravel().tolist(), valid.ravel().tolist()):
        if not m:
            continue
        n += 1
        abs_rel += abs(p - g) / g
        sq_rel += (p - g) ** 2 / g
        sq += (p - g) ** 2
        sq_log += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        for k in range(3):
            if r < 1.25 ** (k + 1):
                hits[k] += 1
    return dict(abs_rel=abs_rel / n, sq_rel=sq_rel / n, rmse=math.sqrt(sq / n),
                rmse_log=math.sqrt(sq_log / n), delta1=hits[0] / n, delta2=hits[1] / n,
                delta3=hits[2] / n, pixel_count=n)


def brute_sky(pred, sky, ceiling):
    y = yhat = 0
    for p, s in zip(pred.ravel().tolist(), sky.ravel().tolist()):
        if s:
            y += 1
            if p > 10 * ceiling:
                yhat += 1
    return 1 - yhat / y, y, yhat


# ---------------------------------------------------------------- Eigen metrics

def test_perfect_prediction(rng):
    gt = rng.uniform(1, 50, (6, 6))
    r = eigen_metrics(gt, gt, np.ones_like(gt, bool))
    assert (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log) == (0, 0, 0, 0)
    assert (r.delta1, r.delta2, r.delta3) == (1, 1, 1)


def test_boundary_ratio_is_strict(rng):
    gt = rng.uniform(1, 50, (8, 8))
    r = eigen_metrics(1.25 * gt, gt, np.ones_like(gt, bool))
    assert r.delta1 == 0.0
    assert r.delta2 == 1.0 and r.delta3 == 1.0
    assert r.abs_rel == pytest.approx(0.25, abs=1e-15)


def test_random_pairs_match_brute_force(rng):
    for _ in range(100):
        gt = rng.uniform(0.5, 80, (8, 8))
        pred = gt * np.exp(rng.normal(0, 0.3, (8, 8)))
        valid = rng.random((8, 8)) > 0.2
        valid[0, 0] = True
        r = eigen_metrics(pred, gt, valid)
        ref = brute_metrics(pred, gt, valid)
        for k, v in ref.items():
            assert abs(getattr(r, k) - v) <= 1e-12 * max(1.0, abs(v)), k


def test_metric_errors(rng):
    gt = rng.uniform(1, 5, (4, 4))
    with pytest.raises(EmptyAggregationError):
        eigen_metrics(gt, gt, np.zeros((4, 4), bool))
    bad = gt.copy()
    bad[1, 1] = 0
    with pytest.raises(DomainError):
        eigen_metrics(gt, bad, np.ones((4, 4), bool))
    with pytest.raises(DomainError):
        eigen_metrics(bad, gt, np.ones((4, 4), bool))
    with pytest.raises(DimensionError):
        eigen_metrics(gt, gt[:3], np.ones((4, 4), bool))


def test_median_scaling(rng):
    gt = rng.uniform(1, 5, (6, 6))
    m = np.ones_like(gt, bool)
    r = eigen_metrics(3.7 * gt, gt, m, median_scaling=True)
    assert r.abs_rel == pytest.approx(0.0, abs=1e-12)
    assert np.median(median_scale(2 * gt, gt, m)) == pytest.approx(np.median(gt))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), k=st.floats(0.01, 100.0))
def test_scale_behaviour_and_delta_order(seed, k):
    r_ = np.random.default_rng(seed)
    gt = r_.uniform(0.5, 50, (5, 5))
    pred = gt * np.exp(r_.normal(0, 0.4, (5, 5)))
    m = np.ones((5, 5), bool)
    a = eigen_metrics(pred, gt, m)
    b = eigen_metrics(k * pred, k * gt, m)
    assert a.delta1 <= a.delta2 <= a.delta3
    assert 0 <= a.delta1 and a.delta3 <= 1
    for name in ("abs_rel", "rmse_log"):
        assert getattr(b, name) == pytest.approx(getattr(a, name), rel=1e-9, abs=1e-12)
    # sq_rel is (p - g)^2 / g, so it scales linearly like rmse.
    assert b.sq_rel == pytest.approx(k * a.sq_rel, rel=1e-9)
    assert b.rmse == pytest.approx(k * a.rmse, rel=1e-9)
    for name in ("delta1", "delta2", "delta3"):
        assert abs(getattr(b, name) - getattr(a, name)) <= 1 / 25 + 1e-12


# ---------------------------------------------------------------- sky accuracy

def test_sky_examples():
    sky = np.zeros((4, 4), bool)
    sky[:2] = True
    assert sky_accuracy(np.zeros((4, 4)), sky).r_s == 1.0
    assert sky_accuracy(np.full((4, 4), 100 * 1e-3), sky).r_s == 0.0
    half = np.zeros((4, 4))
    half[0] = 0.5
    rep = sky_accuracy(half, sky)
    assert (rep.r_s, rep.y_s, rep.y_hat_s) == (0.5, 8, 4)
    with pytest.raises(EmptyAggregationError):
        sky_accuracy(np.zeros((4, 4)), np.zeros((4, 4), bool))
    with pytest.raises(DimensionError):
        sky_accuracy(np.zeros((4, 3)), sky)


def test_sky_tolerance_boundary():
    sky = np.ones((1, 2), bool)
    # Exactly ten times the ceiling is still within one order of magnitude.
    assert sky_accuracy(np.array([[1e-2, 1e-2 + 1e-9]]), sky, 1e-3).y_hat_s == 1


def test_sky_matches_brute_force(rng):
    for _ in range(100):
        pred = rng.uniform(0, 0.03, (8, 8))
        sky = rng.random((8, 8)) > 0.4
        sky[0, 0] = True
        rep = sky_accuracy(pred, sky, 1e-3)
        r_s, y, yhat = brute_sky(pred, sky, 1e-3)
        assert abs(rep.r_s - r_s) <= 1e-12 and (rep.y_s, rep.y_hat_s) == (y, yhat)
        assert 0 <= rep.r_s <= 1


# ---------------------------------------------------------------- protocols

def test_cropped_removes_lower_quarter():
    m = protocol_masks(np.ones((100, 10), bool), np.zeros((100, 10), bool), np.zeros((100, 10)))
    assert not m["cropped"][75:].any() and m["cropped"][:75].all()
    assert not m["specular"].any()


def test_sky_only_image_has_empty_raw():
    m = protocol_masks(np.ones((8, 8), bool), np.ones((8, 8), bool), np.ones((8, 8)))
    assert not m["raw"].any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_mask_containment(seed):
    r_ = np.random.default_rng(seed)
    valid, sky, rho = r_.random((9, 7)) > 0.3, r_.random((9, 7)) > 0.7, r_.random((9, 7))
    m = protocol_masks(valid, sky, rho)
    assert not (m["specular"] & ~m["raw"]).any()
    assert not (m["cropped"] & ~m["raw"]).any()
    assert np.array_equal(m["specular"], m["raw"] & (rho > 0.4))


def test_report_rendering(rng):
    gt = rng.uniform(1, 5, (4, 4))
    r = eigen_metrics(gt * 1.1, gt, np.ones((4, 4), bool), "raw")
    rep = sky_accuracy(np.zeros((4, 4)), np.ones((4, 4), bool))
    csv_text = reports_to_csv([r], rep)
    assert csv_text.splitlines()[0] == "protocol,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,pixel_count,r_s"
    assert csv_text.splitlines()[1].startswith("raw,")
    assert "R_s = 1.0000" in format_table([r], rep)
