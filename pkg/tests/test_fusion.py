import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavisac.fusion import (
    CrbConstants,
    CrbVector,
    FusionWeights,
    NonInformativeSensor,
    ci_fuse,
    crb_from_sinr,
    crb_or_cap,
    measurement_covariance,
)

TABLE = CrbConstants.from_kappa((1.0, 1e-6, 1e-6, 1e-6), 100e6)
pos = st.floats(1e-6, 1e6)


def test_crb_at_unit_sinr():
    c = crb_from_sinr(1.0, TABLE).as_array()
    assert np.allclose(c, [1e-8, 1e-6, 1e-6, 1e-6], rtol=1e-15)


def test_crb_inverse_square_scaling():
    a = crb_from_sinr(1.0, TABLE).as_array()
    b = crb_from_sinr(10.0, TABLE).as_array()
    assert np.allclose(b, a / 100.0, rtol=1e-14)


def test_crb_linear_flag():
    b = crb_from_sinr(10.0, TABLE, linear=True).as_array()
    assert np.allclose(b, crb_from_sinr(1.0, TABLE).as_array() / 10.0)


@pytest.mark.parametrize("sinr", [0.0, -1.0, float("nan")])
def test_crb_noninformative(sinr):
    with pytest.raises(NonInformativeSensor):
        crb_from_sinr(sinr, TABLE)


def test_crb_cap():
    capped = crb_or_cap(0.0, TABLE, 1e6).as_array()
    assert np.all(capped == 1e6)
    tiny = crb_or_cap(1e-9, TABLE, 1e6).as_array()
    assert np.all(tiny <= 1e6)
    assert np.allclose(crb_or_cap(2.0, TABLE, 1e6).as_array(), crb_from_sinr(2.0, TABLE).as_array())


def test_constants_validated():
    with pytest.raises(ValueError):
        CrbConstants(0.0, 1, 1, 1, 1)


def test_crb_vector_rejects_nonpositive():
    with pytest.raises(ValueError):
        CrbVector(1.0, 0.0, 1.0, 1.0)


def test_metropolis_weights():
    assert np.allclose(FusionWeights.metropolis(2).omega, [1 / 3] * 3)
    with pytest.raises(ValueError):
        FusionWeights(np.array([0.5, 0.6]))


def test_ci_equal_sensors_unchanged():
    c = CrbVector(1.0, 2.0, 3.0, 4.0)
    fused = ci_fuse([c, c, c], FusionWeights.metropolis(2))
    assert np.allclose(fused.as_array(), c.as_array())


def test_ci_hand_value():
    # weights 1/3 on variances 1, 2, 4: (1/3)(1 + 1/2 + 1/4) = 7/12
    crbs = [CrbVector(1, 1, 1, 1), CrbVector(2, 2, 2, 2), CrbVector(4, 4, 4, 4)]
    assert np.allclose(ci_fuse(crbs, FusionWeights.metropolis(2)).as_array(), 12 / 7)


def test_ci_bs_only_returns_bs():
    crbs = [CrbVector(1, 2, 3, 4), CrbVector(0.1, 0.1, 0.1, 0.1)]
    assert np.allclose(ci_fuse(crbs, FusionWeights.bs_only(1)).as_array(), [1, 2, 3, 4])


def test_ci_length_mismatch():
    with pytest.raises(ValueError):
        ci_fuse([CrbVector(1, 1, 1, 1)], FusionWeights.metropolis(2))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(pos, min_size=4, max_size=4), min_size=2, max_size=9))
def test_ci_between_min_and_max(vals):
    crbs = [CrbVector.from_array(v) for v in vals]
    fused = ci_fuse(crbs, FusionWeights.metropolis(len(vals) - 1)).as_array()
    arr = np.array(vals)
    assert np.all(fused >= arr.min(axis=0) * (1 - 1e-12))
    assert np.all(fused <= arr.max(axis=0) * (1 + 1e-12))


@settings(max_examples=200, deadline=None)
@given(st.lists(pos, min_size=4, max_size=4), st.lists(st.lists(pos, min_size=4, max_size=4), min_size=1, max_size=8))
def test_ci_dominates_bs_when_uavs_better(bs, uavs):
    # harmonic mean bound: if every UAV variance is <= BS variance, fusion does not hurt
    bs = np.array(bs)
    uavs = [np.minimum(np.array(u), bs) for u in uavs]
    crbs = [CrbVector.from_array(bs)] + [CrbVector.from_array(u) for u in uavs]
    fused = ci_fuse(crbs, FusionWeights.metropolis(len(uavs))).as_array()
    assert np.all(fused <= bs * (1 + 1e-12))


def test_measurement_covariance_diag():
    Psi = measurement_covariance(CrbVector(1, 2, 3, 4))
    assert np.array_equal(Psi, np.diag([1.0, 2, 3, 4]))
