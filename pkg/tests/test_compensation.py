import math
from fractions import Fraction

import numpy as np
import pytest

from momentfit.basis import BasisSpec, evaluate, evaluate_many, feature_product
from momentfit.compensation import (CompensationPlan, build_plan, instantiate,
                                    load_plan, save_plan)
from momentfit.errors import CapacityError, NumericalError, PlanFormatError
from momentfit.noise import NoiseModel

from conftest import cached_plan, upper_entries


def test_constant_entry_is_trivial():
    plan = cached_plan(BasisSpec(n=2, gamma=2))
    [(y_idx, coeff, num, den)] = plan.entry_terms[(0, 0)]
    assert y_idx == 0 and coeff == Fraction(1) and num == () and den == ()


def test_unrolled_square_entry():
    # estimator of x^2 from y: y^2 - 2 E[eps] y + 2 E[eps]^2 - E[eps^2]
    plan = cached_plan(BasisSpec(n=1, gamma=1))
    terms = {(y, num): coeff for y, coeff, num, den in plan.entry_terms[(1, 1)]}
    e1 = (1, "none", 0)
    e2 = (2, "none", 0)
    assert terms[(2, ())] == Fraction(1)
    assert terms[(1, (e1,))] == Fraction(-2)
    assert terms[(0, (e1, e1))] == Fraction(2)
    assert terms[(0, (e2,))] == Fraction(-1)


def test_cross_entry_is_tensor_product():
    # estimator of x1*x2 = (y1 - E[eps]) (y2 - E[eps]) expanded
    spec = BasisSpec(n=2, gamma=1)
    plan = cached_plan(spec)
    terms = {(y, num): coeff for y, coeff, num, den in plan.entry_terms[(1, 2)]}
    e1 = (1, "none", 0)
    idx2 = {f.label(): i for i, f in enumerate(__import__("momentfit").basis.features(spec.extended()))}
    assert terms[(idx2["x1*x2"], ())] == Fraction(1)
    assert terms[(idx2["x1"], (e1,))] == Fraction(-1)
    assert terms[(idx2["x2"], (e1,))] == Fraction(-1)
    assert terms[(idx2["1"], (e1, e1))] == Fraction(1)


def test_zero_noise_collapse_equals_product_expansion():
    """At u=0 the collapsed coefficients are exactly the product expansion."""
    for spec in (BasisSpec(n=2, gamma=2),
                 BasisSpec(n=1, gamma=2, kind="poly-trig", omega=1.3)):
        plan = cached_plan(spec)
        ev = instantiate(plan, NoiseModel(theta=0.0))
        dense = ev.matrix_map.toarray()
        n = plan.n_features
        row = 0
        for k in range(n):
            for l in range(k, n):
                expected = np.zeros(plan.n_extended)
                for idx, coeff in feature_product(spec, k, l):
                    expected[idx] = float(coeff)
                np.testing.assert_array_equal(dense[row], expected)
                row += 1


def test_zero_noise_identity_pointwise():
    spec = BasisSpec(n=2, gamma=2)
    ev = instantiate(cached_plan(spec), NoiseModel(theta=0.0))
    y = np.array([2.0, 3.0])  # integer coordinates make the check exact
    b = evaluate(spec, y)
    np.testing.assert_array_equal(ev.compensate_point(y), np.outer(b, b))
    rng = np.random.default_rng(0)
    for _ in range(10):
        y = rng.uniform(-1, 1, 2)
        b = evaluate(spec, y)
        np.testing.assert_allclose(ev.compensate_point(y), np.outer(b, b), rtol=1e-14)


def test_compensate_point_example():
    plan = cached_plan(BasisSpec(n=1, gamma=1))
    ev = instantiate(plan, NoiseModel(theta=0.3))
    m = ev.compensate_point([2.0])
    np.testing.assert_allclose(m, [[1.0, 2.0], [2.0, 4.0 - 0.03]], rtol=1e-14)
    assert np.array_equal(m, m.T)


def test_compensate_feature_example():
    plan = cached_plan(BasisSpec(n=1, gamma=2))
    ev = instantiate(plan, NoiseModel(theta=0.3))
    np.testing.assert_allclose(ev.compensate_feature([2.0]),
                               [1.0, 2.0, 4.0 - 0.03], rtol=1e-14)


def test_trig_same_order_block_structure():
    # the order-2 block mixes cos/sin pairs through E[cos(q w eps)] only
    spec = BasisSpec(n=1, gamma=2, kind="poly-trig", omega=1.5)
    plan = cached_plan(spec)
    u = 0.4
    ev = instantiate(plan, NoiseModel(theta=u))
    from momentfit.noise import MomentKey, moment
    model = NoiseModel(theta=u)
    # pure-trig feature estimators collapse to atom(y) / E[cos(q w eps)]
    y = 0.7
    c1 = moment(model, MomentKey(0, "cos", 1.5))
    c2 = moment(model, MomentKey(0, "cos", 3.0))
    bhat = ev.compensate_feature([y])
    np.testing.assert_allclose(bhat[2], math.cos(1.5 * y) / c1, rtol=1e-13)
    np.testing.assert_allclose(bhat[3], math.sin(1.5 * y) / c1, rtol=1e-13)
    np.testing.assert_allclose(bhat[7], math.cos(3.0 * y) / c2, rtol=1e-13)
    np.testing.assert_allclose(bhat[8], math.sin(3.0 * y) / c2, rtol=1e-13)


@pytest.mark.parametrize("spec,theta", [
    (BasisSpec(n=1, gamma=2), 0.3),
    (BasisSpec(n=2, gamma=2), 0.2),
    (BasisSpec(n=1, gamma=2, kind="poly-trig", omega=2.0), 0.25),
])
def test_monte_carlo_unbiasedness(spec, theta):
    """E[M-hat(x+eps)] = M(x) within 5 standard errors (reduced-size check)."""
    plan = cached_plan(spec)
    ev = instantiate(plan, NoiseModel(theta=theta))
    rng = np.random.default_rng(99)
    draws = 200_000
    x = rng.uniform(-0.8, 0.8, spec.n)
    eps = rng.uniform(-theta, theta, size=(draws, spec.n))
    entries = ev.compensate_entries_many(x + eps)
    mean = entries.mean(axis=0)
    se = entries.std(axis=0, ddof=1) / math.sqrt(draws)
    b = evaluate(spec, x)
    target = upper_entries(np.outer(b, b))
    assert np.all(np.abs(mean - target) <= 5 * se + 1e-14)
    feats = ev.compensate_features_many(x + eps)
    fmean, fse = feats.mean(axis=0), feats.std(axis=0, ddof=1) / math.sqrt(draws)
    assert np.all(np.abs(fmean - b) <= 5 * fse + 1e-14)


def test_entrywise_convergence_with_sample_size():
    """Max-entry deviation from the noiseless matrix shrinks as L grows."""
    spec = BasisSpec(n=2, gamma=2)
    plan = cached_plan(spec)
    theta = 0.25
    ev = instantiate(plan, NoiseModel(theta=theta))
    rng = np.random.default_rng(31)
    angles = rng.uniform(0, 2 * np.pi, 10 ** 5)
    xs = 0.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    eps = rng.uniform(-theta, theta, size=xs.shape)
    ys = xs + eps
    b_true = evaluate_many(spec, xs)
    devs = {}
    for size in (10 ** 3, 10 ** 4, 10 ** 5):
        est = ev.compensate_entries_many(ys[:size]).mean(axis=0)
        ref = upper_entries(np.einsum("li,lj->ij", b_true[:size], b_true[:size]) / size)
        devs[size] = np.abs(est - ref).max()
    assert devs[10 ** 4] < devs[10 ** 3]
    assert devs[10 ** 5] <= devs[10 ** 3] / 3


def test_bias_matrix_diagnostic():
    spec = BasisSpec(n=1, gamma=1)
    ev = instantiate(cached_plan(spec), NoiseModel(theta=0.3))
    np.testing.assert_allclose(ev.bias_matrix([2.0]), [[0.0, 0.0], [0.0, 0.03]],
                               atol=1e-15)


def test_capacity_guardrail():
    with pytest.raises(CapacityError):
        build_plan(BasisSpec(n=6, gamma=6))  # 924 features > 512
    with pytest.raises(CapacityError):
        build_plan(BasisSpec(n=1, gamma=17))  # symbolic order cap


def test_wide_family_builds():
    spec = BasisSpec(n=4, gamma=3)  # 35 features over 4 coordinates
    plan = build_plan(spec)
    assert plan.n_features == 35


def test_singular_block_detection():
    # E[cos(q w eps)] = sin(q w u)/(q w u) vanishes at q w u = pi
    spec = BasisSpec(n=1, gamma=1, kind="poly-trig", omega=2.0)
    plan = cached_plan(spec)
    u = math.pi / 2.0  # w * u = pi exactly
    with pytest.raises(NumericalError):
        instantiate(plan, NoiseModel(theta=u))
    ev = instantiate(plan, NoiseModel(theta=0.9 * u))
    assert ev.worst_condition > 1.0


def test_plan_round_trip():
    for spec in (BasisSpec(n=2, gamma=2),
                 BasisSpec(n=1, gamma=2, kind="poly-trig", omega=1.25)):
        plan = build_plan(spec)
        payload = save_plan(plan)
        again = load_plan(payload)
        assert again.spec == plan.spec
        assert again.entry_terms == plan.entry_terms
        assert again.vector_terms == plan.vector_terms
        # deterministic rebuild gives identical bytes
        assert save_plan(build_plan(spec)) == payload
        assert save_plan(again) == payload


def test_plan_payload_errors():
    plan = build_plan(BasisSpec(n=1, gamma=1))
    payload = save_plan(plan)
    with pytest.raises(PlanFormatError):
        load_plan(payload[: len(payload) // 2])
    bumped = payload.replace(b'"format_version":1', b'"format_version":2')
    with pytest.raises(PlanFormatError):
        load_plan(bumped)
    with pytest.raises(PlanFormatError):
        load_plan(b"\xff\xfe not json")
