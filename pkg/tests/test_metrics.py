import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from noonphase import holo, io, metrics
from noonphase.errors import DataError
from noonphase.metrics import SensitivityParams, predict_sensitivity


def _img(values, half=np.pi):
    values = np.asarray(values, dtype=float)
    return holo.PhaseImage(values, np.isfinite(values), half)


def test_lu_examples():
    # a horizontal step of 0.2 in a 2x2 image: two of four pairs differ by 0.2
    res = metrics.local_uncertainty(_img([[0.0, 0.2], [0.0, 0.2]]), n_boot=0)
    assert res.n_pairs == 4
    assert res.lu == pytest.approx(np.sqrt(0.02))
    assert res.std_error == pytest.approx(res.lu / np.sqrt(8))
    # differences wrap: pi - 0.05 next to -pi + 0.05 is 0.1 apart
    res = metrics.local_uncertainty(_img([[np.pi - 0.05, -np.pi + 0.05]]), n_boot=0)
    assert res.lu == pytest.approx(0.1)


def test_lu_roi_and_masking():
    phase = np.arange(20, dtype=float).reshape(4, 5) * 0.01
    phase[0, 0] = np.nan
    res = metrics.local_uncertainty(_img(phase), roi=(0, 0, 2, 2), n_boot=0)
    assert res.n_skipped == 2
    assert res.n_pairs == 2
    with pytest.raises(DataError):
        metrics.local_uncertainty(_img(phase), roi=(0, 0, 9, 2))
    mask = np.zeros((4, 5), bool)
    mask[2:, 2:] = True
    assert metrics.local_uncertainty(_img(phase), roi=mask, n_boot=0).n_pairs == 7


@given(c=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_lu_invariant_under_global_constant(c, seed):
    rng = np.random.default_rng(seed)
    phase = rng.normal(scale=0.3, size=(6, 6))
    a = metrics.local_uncertainty(_img(phase), n_boot=0).lu
    b = metrics.local_uncertainty(_img(phase + c), n_boot=0).lu
    assert a == pytest.approx(b, rel=1e-9)


def test_lu_bootstrap_close_to_analytic():
    rng = np.random.default_rng(1)
    res = metrics.local_uncertainty(_img(rng.normal(scale=0.1, size=(30, 30))), n_boot=400)
    assert res.bootstrap_error == pytest.approx(res.std_error, rel=0.3)


def test_lu_ratio():
    a = metrics.LUResult(0.1, 0.01, 100, {})
    b = metrics.LUResult(0.2, 0.02, 100, {})
    r, err = metrics.lu_ratio(a, b)
    assert r == 0.5
    assert err == pytest.approx(0.5 * np.sqrt(0.02))


def test_zncc_exact_signs():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(8, 8))
    assert metrics.zncc(a, a) == 1.0
    assert metrics.zncc(a, -a) == -1.0
    with pytest.raises(DataError):
        metrics.zncc(a, np.ones((8, 8)))
    with pytest.raises(DataError):
        metrics.zncc(a, a[:4])


@given(scale=st.floats(0.01, 100), shift=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_zncc_affine_invariance(scale, shift, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 10, 10))
    assert metrics.zncc(a * scale + shift, b) == pytest.approx(metrics.zncc(a, b), abs=1e-9)


def test_kappa_poisson_and_constant():
    rng = np.random.default_rng(3)
    est = metrics.kappa_estimate(rng.poisson(5000, size=2000))
    assert 0.93 <= est.kappa <= 1.07
    assert est.ci_low < est.kappa < est.ci_high
    assert metrics.kappa_estimate(np.full(30, 100.0)).kappa == 0.0
    with pytest.raises(DataError):
        metrics.kappa_estimate(np.ones(5))


def test_kappa_halves_agree():
    rng = np.random.default_rng(4)
    x = rng.poisson(2000, size=4000)
    a = metrics.kappa_estimate(x[:2000], n_boot=200)
    b = metrics.kappa_estimate(x[2000:], n_boot=200)
    assert abs(a.kappa - b.kappa) < 0.1


# -- sensitivity model ------------------------------------------------------


def test_sensitivity_examples():
    assert predict_sensitivity(SensitivityParams(1.0), 0.3)["ratio"] == pytest.approx(0.70711, abs=1e-5)
    assert predict_sensitivity(SensitivityParams(0.94, kappa=1.05), 0.3)["ratio"] == pytest.approx(0.78985, abs=1e-5)


@given(
    v=st.floats(0.1, 1.0),
    vc=st.floats(0.1, 1.0),
    kappa=st.floats(0.5, 3.0),
    i_tot=st.floats(1e3, 1e8),
    phi=st.floats(-3, 3),
)
def test_sensitivity_closed_form(v, vc, kappa, i_tot, phi):
    out = predict_sensitivity(SensitivityParams(v, vc, kappa, i_tot), phi)
    assert out["sd_classical"] == pytest.approx(np.sqrt(2) / (vc * np.sqrt(i_tot)), rel=1e-9)
    assert out["sd_noon"] == pytest.approx(kappa / (v * np.sqrt(i_tot)), rel=1e-9)
    assert out["norm_noon"] == pytest.approx(kappa / v, rel=1e-9)


def test_sensitivity_is_flat_in_phase():
    phis = np.linspace(-np.pi, np.pi, 101)
    ratio = predict_sensitivity(SensitivityParams(0.9, kappa=1.2), phis)["ratio"]
    assert np.ptp(ratio) < 1e-9


def test_budget_invariance_and_large_kappa():
    a = predict_sensitivity(SensitivityParams(0.9, i_tot=1e4), 0.2)
    b = predict_sensitivity(SensitivityParams(0.9, i_tot=1e7), 0.2)
    assert a["ratio"] == pytest.approx(b["ratio"], rel=1e-12)
    assert a["norm_noon"] == pytest.approx(b["norm_noon"], rel=1e-12)
    ratios = [predict_sensitivity(SensitivityParams(0.9, kappa=k), 0.2)["ratio"] for k in (1, 10, 100)]
    assert ratios[0] < ratios[1] < ratios[2]
    assert ratios[2] == pytest.approx(100 * ratios[0])


def test_equal_shares_raise_the_ratio():
    p = SensitivityParams(1.0, noon_shares=(1 / 3, 1 / 3, 1 / 3))
    # fixed (1, 1, 2) weights on equal shares inflate the variance by 9/8
    assert predict_sensitivity(p, 0.1)["ratio"] == pytest.approx(np.sqrt(0.5 * 9 / 8), rel=1e-9)
    with pytest.raises(DataError):
        SensitivityParams(1.0, noon_shares=(0.5, 0.5, 0.5))


def test_sensitivity_matches_poisson_monte_carlo():
    rng = np.random.default_rng(5)
    p = SensitivityParams(0.8, kappa=1.0, i_tot=4e5)
    phi = 0.4
    n = 4000
    pred = predict_sensitivity(p, phi)
    cl = []
    for proj in ("D", "A"):
        means = [0.5 * p.i_tot / 4 * (1 + holo.FRINGE_SIGN[proj] * np.cos(phi + a)) for a in holo.CLASSICAL_ALPHAS]
        acq = holo.AcquisitionSet(proj, [rng.poisson(m, n).astype(float) for m in means])
        cl.append(holo.psdh_classical(acq))
    nn = []
    for proj, share in zip(("DD", "AA", "DA"), p.noon_shares):
        means = [
            share * p.ci_tot / 4 * (1 + holo.FRINGE_SIGN[proj] * p.visibility * np.cos(2 * (phi + a)))
            for a in holo.NOON_ALPHAS
        ]
        acq = holo.AcquisitionSet(proj, [rng.poisson(m, n).astype(float) for m in means])
        nn.append(holo.psdh_noon(acq))
    sd_cl = np.std(holo.combine_classical(*cl).phase)
    sd_nn = np.std(holo.combine_noon(*nn).phase)
    assert sd_cl == pytest.approx(pred["sd_classical"], rel=0.05)
    assert sd_nn == pytest.approx(pred["sd_noon"], rel=0.05)


def test_curves_band_and_csv(tmp_path):
    p = SensitivityParams(0.94, kappa=1.05)
    phis = np.linspace(-np.pi / 2, np.pi / 2, 11)
    curves = metrics.sensitivity_curves(p, phis, visibility_err=0.06)
    assert tuple(curves) == metrics.CURVE_COLUMNS
    assert np.all(curves["norm_noon_low"] <= curves["norm_noon"])
    assert np.all(curves["norm_noon"] <= curves["norm_noon_high"])
    assert np.all(curves["ratio_low"] <= curves["ratio"]) and np.all(curves["ratio"] <= curves["ratio_high"])
    assert np.allclose(curves["ratio_ideal"], 1 / np.sqrt(2))
    path = tmp_path / "curves.csv"
    io.write_columns(path, curves)
    header = path.read_text().splitlines()[0]
    assert header.split(",") == list(metrics.CURVE_COLUMNS)


def test_param_validation():
    with pytest.raises(DataError):
        SensitivityParams(0.0)
    with pytest.raises(DataError):
        SensitivityParams(0.9, kappa=0)
    with pytest.raises(DataError):
        SensitivityParams(0.9, i_tot=-1)
    assert SensitivityParams(0.9, kappa=0.8).sub_unity_kappa
    assert dataclasses.replace(SensitivityParams(0.9), i_tot=10.0).ci_tot == 5.0
