import numpy as np
import pytest
from scipy.stats import norm

from poolfix.debias import DebiasedDelta
from poolfix.detector import DetectorSettings, detect_mmes, odrlt_test
from poolfix.errors import DegenerateError, ParameterError
from poolfix.simkit import center, gen_pooling, gen_signal

# fixed penalties keep these instances well inside the solver's budget;
# the declared sigma is large against the lasso shrinkage bias
LAMS = DetectorSettings(lambdas=(1.0, 0.2))
SIGMA = 10.0


@pytest.fixture(scope="module")
def system():
    B = gen_pooling(80, 200, 0.5, 21).B
    beta = gen_signal(200, 5, seed=21).beta
    cs = center(np.zeros(80), B, 0.5)
    return cs.A, cs.pairing, beta


def dd(delta_w, sd):
    return DebiasedDelta(delta_w=np.asarray(delta_w, float), sigma_diag=np.asarray(sd, float))


def test_odrlt_zero_estimate():
    stats, pv, rej = odrlt_test(dd(np.zeros(5), np.ones(5)), 0.05)
    assert len(rej) == 0
    np.testing.assert_array_equal(pv, 1.0)


def test_odrlt_threshold_examples():
    stats, pv, rej = odrlt_test(dd([2.5, 1.0, -2.5], [1.0, 1.0, 1.0]), 0.05)
    assert list(rej) == [0, 2]
    # 2 (1 - Phi(2.5)), oracle value from tables
    assert pv[0] == pytest.approx(0.012419, abs=1e-5)
    assert pv[1] > 0.05
    assert norm.isf(0.025) == pytest.approx(1.95996, abs=1e-5)


def test_odrlt_statistic_scales_by_sd():
    stats, _, rej = odrlt_test(dd([5.0], [2.0]), 0.05)
    assert stats[0] == pytest.approx(2.5)
    assert list(rej) == [0]


def test_odrlt_one_sided():
    # stat 1.8: two-sided p 0.072 (kept), one-sided p 0.036 (rejected)
    d = dd([1.8], [1.0])
    assert len(odrlt_test(d, 0.05)[2]) == 0
    _, pv, rej = odrlt_test(d, 0.05, two_sided=False)
    assert pv[0] == pytest.approx(0.035930, abs=1e-5)
    assert list(rej) == [0]


def test_odrlt_errors():
    with pytest.raises(DegenerateError):
        odrlt_test(dd([1.0, 1.0], [1.0, 0.0]), 0.05)
    with pytest.raises(ParameterError):
        odrlt_test(dd([1.0], [1.0]), 1.5)


def test_noiseless_clean_flags_nothing(system):
    A, pairing, beta = system
    res = detect_mmes(A @ beta, A, 0.5, 4, 0.05, SIGMA, pairing, LAMS)
    assert res.J == []
    assert res.passes == [[]]
    assert res.rows_B.size == 0
    assert res.stats.max() < 1.0


def test_single_large_mismatch(system):
    A, pairing, beta = system
    y = A @ beta
    y[0] += 1e3
    res = detect_mmes(y, A, 0.5, 8, 0.05, SIGMA, pairing, LAMS)
    assert res.J == [0]
    assert res.stats[0] > 100
    np.testing.assert_array_equal(res.rows_B, np.sort(pairing[0]))


def test_overflow_keeps_top_statistics(system):
    A, pairing, beta = system
    y = A @ beta
    rows = [3, 9, 15]  # r_U + 2 mismatches of decreasing size
    for k, i in enumerate(rows):
        y[i] += 1000 * (1 - 0.15 * k)
    r_U = 1
    res = detect_mmes(y, A, 0.5, r_U, 0.05, SIGMA, pairing, LAMS)
    flagged = sorted(set(sum(res.passes, [])))
    assert len(flagged) > r_U
    top = sorted(flagged, key=lambda i: -res.stats[i])[:r_U]
    assert res.J == sorted(top)
    # final fit uses only the unflagged rows
    assert len(res.fit.delta_hat) == A.shape[0] - r_U


def test_loop_adds_later_passes(system):
    A, pairing, beta = system
    y = A @ beta
    for k, i in enumerate([3, 9, 15, 21, 27]):
        y[i] += 1000 * (1 - 0.15 * k)
    res = detect_mmes(y, A, 0.5, 3, 0.05, SIGMA, pairing, LAMS)
    assert len(res.J) <= 3
    assert set(res.passes[0]) <= set(res.J)
    for a, b in zip(res.passes, res.passes[1:]):
        assert not set(a) & set(b)


def test_detect_argument_errors(system):
    A, pairing, beta = system
    y = A @ beta
    with pytest.raises(ParameterError):
        detect_mmes(y, A, 0.5, A.shape[0], 0.05, SIGMA, pairing, LAMS)
    with pytest.raises(ParameterError):
        detect_mmes(y, A, 0.5, 2, 0.05, SIGMA, pairing, DetectorSettings(lambda_mode="oracle"))
