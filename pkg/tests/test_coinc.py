import numpy as np
import pytest
from _oracles import coincidence_double_sum
from conftest import random_stack
from hypothesis import given
from hypothesis import strategies as st

from noonphase import coinc
from noonphase.errors import DataError, FitError
from noonphase.frames import DetectorGeometry, FrameStack
from noonphase.pairgen import DetectorNoiseParams, PairSourceParams, SceneConfig, render_dark_frames, render_frames

# random test stacks run at occupancies the counter warns about
pytestmark = pytest.mark.filterwarnings("ignore:pixel occupancy")


def _check_against_oracle(stack, dense):
    oracle = coincidence_double_sum(dense)
    for proj in coinc.PROJECTIONS:
        cc = coinc.count_coincidences(stack, proj)
        want = oracle[np.ix_(cc.rows, cc.cols)]
        if cc.same_half:
            np.fill_diagonal(want, 0)
        assert np.array_equal(cc.numerator, want)
        # the float counts are the same rationals
        assert np.allclose(cc.counts, want / cc.n_frames, rtol=0, atol=1e-12)


@given(seed=st.integers(0, 2**31), n=st.integers(1, 30), occ=st.floats(0.0, 0.6))
def test_counts_match_double_sum(seed, n, occ):
    rng = np.random.default_rng(seed)
    stack, dense = random_stack(rng, 4, 2, n, occ)
    _check_against_oracle(stack, dense)


def test_alternating_example():
    geo = DetectorGeometry(4, 1)
    dense = np.array([[1, 0, 1, 0], [0, 0, 0, 0], [1, 0, 1, 0], [0, 0, 0, 0]], dtype=bool).reshape(4, 1, 4)
    cc = coinc.count_coincidences(FrameStack.from_dense(dense, geo), "DA")
    assert cc.counts[0, 0] == 1.0
    dense[:, 0, 2] = [0, 1, 0, 1]
    cc = coinc.count_coincidences(FrameStack.from_dense(dense, geo), "DA")
    assert cc.counts[0, 0] == -1.0


def test_zero_frames_raise():
    with pytest.raises(DataError):
        coinc.count_coincidences(FrameStack.from_dense(np.zeros((0, 1, 2), dtype=bool)), "DD")


def test_independent_pixels_average_to_zero():
    rng = np.random.default_rng(4)
    stack, _ = random_stack(rng, 8, 4, 40000, 0.1)
    cc = coinc.count_coincidences(stack, "DA")
    # per-entry sd is about sqrt(N p^2) = 20
    assert abs(cc.counts.mean()) < 3 * 20 / np.sqrt(cc.counts.size)


@given(seed=st.integers(0, 2**31))
def test_frame_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    stack, dense = random_stack(rng, 6, 3, 25, 0.2)
    perm = rng.permutation(25)
    shuffled = FrameStack.from_dense(dense.reshape(25, 3, 6)[perm].astype(bool), stack.geometry)
    for p in coinc.PROJECTIONS:
        assert np.array_equal(coinc.count_coincidences(stack, p).numerator, coinc.count_coincidences(shuffled, p).numerator)


def test_threads_agree():
    rng = np.random.default_rng(0)
    a, dense = random_stack(rng, 16, 8, 9000, 0.05)
    b = FrameStack.from_dense(dense.reshape(9000, 8, 16).astype(bool), a.geometry)
    g1, s1 = coinc.gram(a, threads=1)
    g4, s4 = coinc.gram(b, threads=4)
    assert np.array_equal(g1, g4) and np.array_equal(s1, s4)


def test_singles_match_naive_sum():
    rng = np.random.default_rng(5)
    stack, dense = random_stack(rng, 6, 3, 50, 0.3)
    s, i_tot = coinc.singles(stack)
    assert np.array_equal(s, dense.sum(axis=0))
    assert i_tot == dense.sum()


def test_high_occupancy_warns():
    stack = FrameStack.from_dense(np.ones((5, 2, 2), dtype=bool))
    with pytest.warns(RuntimeWarning):
        coinc.count_coincidences(stack, "DD")


# -- crosstalk --------------------------------------------------------------


@pytest.fixture(scope="module")
def dark_pair():
    geo = DetectorGeometry(16, 8)
    with_x = render_dark_frames(DetectorNoiseParams(dark_prob=2e-3, crosstalk={(1, 0): 0.03, (0, 1): 0.01}), geo, 150000, 1)
    without = render_dark_frames(DetectorNoiseParams(dark_prob=2e-3), geo, 150000, 1)
    return with_x, without


def test_crosstalk_recovery(dark_pair):
    xmap = coinc.estimate_crosstalk(dark_pair[0], max_radius=2)
    assert xmap.get(1, 0) == pytest.approx(0.03, rel=0.15)
    assert xmap.get(0, 1) == pytest.approx(0.01, rel=0.25)
    assert xmap.get(-1, 0) == xmap.get(1, 0)
    assert xmap.get(2, 2) < 0.002
    assert xmap.table().shape == (3, 3)


def test_crosstalk_free_map_is_near_zero(dark_pair):
    xmap = coinc.estimate_crosstalk(dark_pair[1], max_radius=2)
    assert max(xmap.probabilities.values()) < 0.003


def test_empty_dark_stack_raises():
    with pytest.raises(DataError):
        coinc.estimate_crosstalk(FrameStack.from_dense(np.zeros((10, 2, 4), dtype=bool)))


def test_zero_map_subtraction_is_identity():
    rng = np.random.default_rng(1)
    stack, _ = random_stack(rng, 8, 4, 200, 0.1)
    xmap = coinc.CrosstalkMap({(dx, dy): 0.0 for dx in range(3) for dy in range(3) if dx or dy}, 2, 0, 1)
    for p in coinc.PROJECTIONS:
        cc = coinc.count_coincidences(stack, p)
        assert np.array_equal(coinc.subtract_crosstalk(cc, xmap).counts, cc.counts)


def test_crosstalk_subtraction_model():
    rng = np.random.default_rng(2)
    stack, _ = random_stack(rng, 8, 4, 300, 0.1)
    cc = coinc.count_coincidences(stack, "DD")
    xmap = coinc.CrosstalkMap({(1, 0): 0.1, (0, 1): 0.0, (1, 1): 0.0}, 1, 0, 1)
    out = coinc.subtract_crosstalk(cc, xmap)
    diff = cc.counts - out.counts
    expected = 0.1 * (cc.singles_rows[:, None] + cc.singles_cols[None, :])
    near = (np.abs(cc.col_xy()[0][None, :] - cc.row_xy()[0][:, None]) == 1) & (
        cc.col_xy()[1][None, :] == cc.row_xy()[1][:, None]
    )
    assert np.allclose(diff[near], expected[near])
    assert np.all(diff[~near] == 0)
    da = coinc.count_coincidences(stack, "DA")
    assert np.array_equal(coinc.subtract_crosstalk(da, xmap).counts, da.counts)


# -- correlation fits and filtering ------------------------------------------


@pytest.fixture(scope="module")
def pair_stack():
    geo = DetectorGeometry(40, 20)
    src = PairSourceParams(sigma_minus=300.0, sigma_plus=2400.0, pair_rate=0.5)
    scene = SceneConfig(np.full(geo.half_shape, np.pi / 4))
    return render_frames(scene, src, DetectorNoiseParams(), geo, 120000, 21)


def test_fit_sigma_dd_and_da(pair_stack):
    expected = np.sqrt(4 + 1 / 6)
    dd = coinc.fit_correlation_gaussian(coinc.count_coincidences(pair_stack, "DD"))
    da = coinc.fit_correlation_gaussian(coinc.count_coincidences(pair_stack, "DA"))
    assert dd.sigma_fit == pytest.approx(expected, rel=0.1)
    assert da.sigma_fit == pytest.approx(expected, rel=0.1)
    assert da.d_x == pytest.approx(20.0, abs=0.3)
    assert da.d_y == pytest.approx(0.0, abs=0.3)
    assert dd.d_x == 0.0


def test_narrow_correlation_gives_small_sigma():
    # 0.2 px: a width of exactly zero leaves a one-pixel peak with nothing to fit
    geo = DetectorGeometry(24, 12)
    src = PairSourceParams(sigma_minus=30.0, sigma_plus=1200.0, pair_rate=0.5)
    stack = render_frames(SceneConfig(np.full(geo.half_shape, np.pi / 4)), src, DetectorNoiseParams(), geo, 40000, 2)
    fit = coinc.fit_correlation_gaussian(coinc.count_coincidences(stack, "DA"))
    assert fit.sigma_fit <= 0.6


def test_fit_errors():
    rng = np.random.default_rng(0)
    stack, _ = random_stack(rng, 8, 4, 50, 0.05)
    cc = coinc.count_coincidences(stack, "DD")
    with pytest.raises(FitError):
        coinc.fit_correlation_gaussian(cc.copy_with(np.zeros_like(cc.counts)))
    with pytest.raises(FitError):
        coinc.fit_correlation_gaussian(cc.copy_with(np.abs(cc.counts)), min_counts=1e9)


def test_filter_extremes(pair_stack):
    cc = coinc.count_coincidences(pair_stack, "DD")
    fit = coinc.fit_correlation_gaussian(cc)
    assert np.array_equal(coinc.filter_uncorrelated(cc, fit, 0.0).counts, cc.counts)
    assert not coinc.filter_uncorrelated(cc, fit, 1.0).counts.any()
    with pytest.raises(ValueError):
        coinc.acceptance_mask(cc, fit, 1.5)
    kept = [coinc.acceptance_mask(cc, fit, t).sum() for t in (0.1, 0.5, 0.9)]
    assert kept[0] > kept[1] > kept[2]


def test_subtract_and_filter_commute(pair_stack):
    cc = coinc.count_coincidences(pair_stack, "DD")
    fit = coinc.fit_correlation_gaussian(cc)
    xmap = coinc.CrosstalkMap({(1, 0): 0.02, (0, 1): 0.01, (1, 1): 0.0}, 1, 0, 1)
    a = coinc.filter_uncorrelated(coinc.subtract_crosstalk(cc, xmap), fit)
    b = coinc.subtract_crosstalk(coinc.filter_uncorrelated(cc, fit), xmap)
    assert np.allclose(a.counts, b.counts)


# -- projections ---------------------------------------------------------------


def _toy_tensor(projection, counts):
    geo = DetectorGeometry(4, 1)
    rows = geo.half_pixels("right" if projection == "AA" else "left")
    cols = geo.half_pixels("left" if projection == "DD" else "right")
    z = np.zeros(2)
    return coinc.CoincidenceTensor(projection, geo, np.asarray(counts, float), rows, cols, 1, z, z)


def test_project_image_examples():
    img = coinc.project_image(_toy_tensor("DD", [[0, 3], [3, 0]]))
    assert img.data.tolist() == [[3, 3, 0, 0]]
    img = coinc.project_image(_toy_tensor("AA", [[0, 2], [2, 0]]))
    assert img.primary.tolist() == [[2, 2]]
    img = coinc.project_image(_toy_tensor("DA", [[1, 0], [0, 4]]))
    assert img.data.tolist() == [[1, 4, 1, 4]]
    assert img.left.tolist() == img.right.tolist()


@given(seed=st.integers(0, 2**31))
def test_projection_conserves_counts(seed):
    rng = np.random.default_rng(seed)
    stack, _ = random_stack(rng, 6, 3, 30, 0.2)
    for p in coinc.PROJECTIONS:
        cc = coinc.count_coincidences(stack, p)
        img = coinc.project_image(cc)
        assert img.total() == pytest.approx(cc.total(), abs=1e-9)
        factor = 2.0 if p == "DA" else 1.0
        assert img.data.sum() == pytest.approx(factor * cc.total(), abs=1e-9)


def test_histograms_of_anticorrelated_pairs():
    # photons always at mirror positions: the sum coordinate is a delta
    geo = DetectorGeometry(10, 5)
    frames = []
    for x in range(5):
        for y in range(5):
            f = np.zeros((5, 10), dtype=bool)
            f[y, x] = True
            f[4 - y, 5 + (4 - x)] = True
            frames.append(f)
    stack = FrameStack.from_dense(np.array(frames * 4), geo)
    cc = coinc.count_coincidences(stack, "DA")
    hist = coinc.project_sum_coordinates(cc)
    peak = np.unravel_index(np.argmax(hist.counts), hist.counts.shape)
    assert (hist.x[peak[1]], hist.y[peak[0]]) == (4, 4)
    positive = hist.counts.copy()
    positive[peak] = 0
    assert hist.counts[peak] > 10 * np.abs(positive).max()
    assert hist.counts.sum() == pytest.approx(cc.total())
    diff = coinc.project_difference_coordinates(cc)
    assert diff.counts.sum() == pytest.approx(cc.total())


def test_sum_histogram_tracks_pump_width():
    geo = DetectorGeometry(64, 32)
    src = PairSourceParams(sigma_minus=300.0, sigma_plus=1200.0, pair_rate=0.5)
    stack = render_frames(SceneConfig(np.full(geo.half_shape, np.pi / 4)), src, DetectorNoiseParams(), geo, 30000, 2)
    fit = coinc.fit_histogram_gaussian(coinc.project_sum_coordinates(coinc.count_coincidences(stack, "DA")))
    # sum coordinate r + r' = 2 * midpoint, so its sd is sigma_plus in pixels
    assert fit["sigma"] == pytest.approx(8.0, rel=0.1)
