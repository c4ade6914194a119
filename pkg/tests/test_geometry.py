import numpy as np
import pytest

from sam_matcher.geometry import DegenerateError, corner_error, dlt, estimate_homography, project


def random_h(rng):
    H = np.eye(3) + rng.normal(scale=[[0.1, 0.1, 5], [0.1, 0.1, 5], [1e-4, 1e-4, 0]], size=(3, 3))
    return H / H[2, 2]


def test_project_identity_and_translation():
    pts = np.array([[1.0, 2.0], [3.0, -4.0]])
    assert np.array_equal(project(np.eye(3), pts), pts)
    T = np.array([[1, 0, 8], [0, 1, 0], [0, 0, 1.0]])
    assert np.array_equal(project(T, pts), pts + [8, 0])


def test_dlt_exact_fit(rng):
    for _ in range(20):
        H = random_h(rng)
        src = rng.uniform(0, 64, size=(12, 2))
        est = dlt(src, project(H, src))
        assert est[2, 2] == pytest.approx(1.0)
        assert np.max(np.abs(project(est, src) - project(H, src))) < 1e-6


def test_dlt_batched_matches_single(rng):
    src = rng.uniform(0, 64, size=(3, 6, 2))
    dst = np.stack([project(random_h(rng), s) for s in src])
    batched = dlt(src, dst)
    for b in range(3):
        assert np.allclose(batched[b], dlt(src[b], dst[b]))


def test_dlt_needs_four_points():
    with pytest.raises(DegenerateError):
        dlt(np.zeros((3, 2)), np.zeros((3, 2)))


def test_ransac_identity(rng):
    src = rng.uniform(0, 64, size=(30, 2))
    H, inliers = estimate_homography(src, src.copy(), seed=0)
    assert np.max(np.abs(H - np.eye(3))) < 1e-6
    assert inliers.all()


def test_ransac_recovers_inliers_with_outliers(rng):
    for trial in range(5):
        H = random_h(rng)
        src = rng.uniform(0, 64, size=(50, 2))
        dst = project(H, src)
        out = rng.choice(50, size=15, replace=False)
        dst[out] += rng.uniform(20, 40, size=(15, 2)) * rng.choice([-1, 1], size=(15, 2))
        est, inliers = estimate_homography(src, dst, seed=trial)
        expect = np.ones(50, bool)
        expect[out] = False
        assert np.array_equal(inliers, expect)
        assert np.max(np.abs(project(est, src[expect]) - dst[expect])) < 1e-6


def test_ransac_is_seeded(rng):
    src = rng.uniform(0, 64, size=(40, 2))
    dst = project(random_h(rng), src) + rng.normal(scale=1.0, size=(40, 2))
    a = estimate_homography(src, dst, seed=3)
    b = estimate_homography(src, dst, seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_ransac_degenerate_inputs():
    with pytest.raises(DegenerateError):
        estimate_homography(np.zeros((3, 2)), np.zeros((3, 2)))
    line = np.stack([np.arange(10.0), 2 * np.arange(10.0)], axis=1)
    with pytest.raises(DegenerateError):
        estimate_homography(line, line)


def test_corner_error():
    assert corner_error(np.eye(3), np.eye(3), 64, 64) == 0.0
    T = np.array([[1, 0, 3], [0, 1, 4], [0, 0, 1.0]])
    assert corner_error(T, np.eye(3), 64, 64) == pytest.approx(5.0)
    assert corner_error(None, np.eye(3), 64, 64) == float("inf")
    assert corner_error(np.full((3, 3), np.nan), np.eye(3), 64, 64) == float("inf")
