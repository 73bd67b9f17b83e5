import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from slt_cbm.rlct import (
    Case,
    ComposedDims,
    ConceptKind,
    ConsistencyError,
    InvalidDimsError,
    ModelDims,
    Relation,
    ResponseKinds,
    RlctResult,
    TaskKind,
    compare_models,
    expected_generalization_error,
    format_fraction,
    free_energy_penalty,
    multitask_case,
    parse_fraction,
    rlct_cbm,
    rlct_cbm_composed,
    rlct_cbm_typed,
    rlct_multitask,
    rlct_multitask_composed,
    rlct_multitask_typed,
    rlct_standard,
)

CAT_BIN = ResponseKinds(TaskKind.CATEGORICAL, ConceptKind.BINARY)
CAT_REAL = ResponseKinds(TaskKind.CATEGORICAL, ConceptKind.REAL)
REAL_BIN = ResponseKinds(TaskKind.REAL, ConceptKind.BINARY)


def mt(n, m, k, h, h0):
    return rlct_multitask(ModelDims(n_in=n, n_out=m, n_concepts=k, hidden=h, true_rank=h0))


# --- CBM --------------------------------------------------------------------------


def test_cbm_published_value():
    r = rlct_cbm(ModelDims(1, 10, 3))
    assert (r.lam, r.multiplicity, r.case) == (Fraction(33, 2), 1, Case.REGULAR)


def test_cbm_smallest():
    assert rlct_cbm(ModelDims(1, 1, 1)).lam == 1


def test_cbm_ignores_gamma_and_hidden():
    a = rlct_cbm(ModelDims(4, 6, 5, gamma=0.1))
    b = rlct_cbm(ModelDims(4, 6, 5, hidden=7, gamma=10.0))
    assert a == b


def test_cbm_rejects_no_concepts():
    with pytest.raises(InvalidDimsError):
        rlct_cbm(ModelDims(1, 1, 0))


# --- Multitask / Standard ------------------------------------------------------------


def test_multitask_case2_published():
    r = mt(1, 10, 3, 3, 1)
    assert (r.lam, r.multiplicity, r.case) == (Fraction(13, 2), 1, Case.MT_CASE2)


def test_multitask_case1b_published():
    r = mt(3, 2, 1, 2, 1)
    assert (r.lam, r.multiplicity, r.case) == (Fraction(7, 2), 2, Case.MT_CASE1B)


def test_multitask_case4_published():
    r = mt(2, 1, 1, 4, 2)
    assert (r.lam, r.multiplicity, r.case) == (Fraction(2), 1, Case.MT_CASE4)


def test_multitask_case3_value():
    # N=5, O=M+K=2, H=2, H0=0: O+H = 4 < N+H0 = 5, value (HO + H0(N-H))/2 = 2
    r = mt(5, 1, 1, 2, 0)
    assert r.case is Case.MT_CASE3
    assert r.lam == 2


def test_standard_published():
    r = rlct_standard(2, 2, 2, 1)
    assert (r.lam, r.multiplicity, r.case) == (Fraction(2), 2, Case.MT_CASE1B)


def test_standard_line_model():
    r = rlct_standard(1, 1, 1, 1)
    assert (r.lam, r.multiplicity, r.case) == (Fraction(1, 2), 1, Case.MT_CASE1A)


def test_rank_bound_rejected():
    with pytest.raises(InvalidDimsError):
        mt(1, 2, 1, 3, 2)
    with pytest.raises(InvalidDimsError):
        mt(3, 3, 1, 1, 2)


def test_relaxed_rank_only_needs_h0_le_h():
    r = rlct_multitask(ModelDims(1, 10, 3, 6, 4), strict_rank=False)
    assert r.lam > 0
    with pytest.raises(InvalidDimsError):
        rlct_multitask(ModelDims(1, 10, 3, 3, 4), strict_rank=False)


def test_rank_zero_accepted():
    assert mt(2, 2, 0, 2, 0).lam > 0


@pytest.mark.parametrize("field,value", [("n_in", 0), ("n_out", 0), ("hidden", 0), ("n_concepts", -1), ("true_rank", -1)])
def test_dims_validation(field, value):
    kw = dict(n_in=1, n_out=1, n_concepts=1, hidden=1, true_rank=0)
    kw[field] = value
    with pytest.raises(InvalidDimsError):
        ModelDims(**kw)


@pytest.mark.parametrize("gamma", [0.0, -1.0, float("nan"), float("inf")])
def test_gamma_must_be_positive_finite(gamma):
    with pytest.raises(InvalidDimsError):
        ModelDims(1, 1, 1, gamma=gamma)


def test_result_invariants_enforced():
    with pytest.raises(ConsistencyError):
        RlctResult(Fraction(1, 3), 1, Case.REGULAR)
    with pytest.raises(ConsistencyError):
        RlctResult(Fraction(1, 2), 2, Case.MT_CASE1A)
    with pytest.raises(ConsistencyError):
        RlctResult(Fraction(0), 1, Case.REGULAR)


dims_small = st.tuples(*(st.integers(1, 12) for _ in range(3)), st.integers(0, 12))


@given(dims_small)
def test_symmetry_and_bound(t):
    n, o, h, h0 = t
    if h0 > min(h, n, o):
        return
    a = mt(n, o, 0, h, h0)
    b = mt(o, n, 0, h, h0)
    assert (a.lam, a.multiplicity) == (b.lam, b.multiplicity)
    assert a.lam <= Fraction(h * (n + o), 2)
    assert (a.lam * 8).denominator == 1
    assert (a.multiplicity == 2) == (a.case is Case.MT_CASE1B)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 9))
def test_k_zero_is_standard(n, m, h, h0):
    if h0 > min(h, n, m):
        return
    assert mt(n, m, 0, h, h0) == rlct_standard(n, h, m, h0)


def test_multitask_case_matches_result():
    d = ModelDims(1, 10, 3, 3, 1)
    assert multitask_case(d) is rlct_multitask(d).case


# --- typed and composed ----------------------------------------------------------


def test_cbm_typed_published():
    assert rlct_cbm_typed(ModelDims(1, 10, 3), CAT_BIN) == RlctResult(Fraction(15), 1, Case.REGULAR)
    assert rlct_cbm_typed(ModelDims(2, 2, 4), CAT_REAL).lam == 6


def test_cbm_typed_real_task_equals_plain():
    d = ModelDims(3, 4, 2)
    assert rlct_cbm_typed(d, REAL_BIN) == rlct_cbm(d)


def test_categorical_needs_two_classes():
    with pytest.raises(InvalidDimsError):
        rlct_cbm_typed(ModelDims(1, 1, 1), CAT_REAL)
    with pytest.raises(InvalidDimsError):
        rlct_multitask_typed(ModelDims(1, 1, 1, 1, 0), CAT_REAL)


def test_multitask_typed_published():
    r = rlct_multitask_typed(ModelDims(1, 10, 3, 3, 1), CAT_REAL)
    assert r == mt(1, 9, 3, 3, 1)
    assert (r.lam, r.case) == (Fraction(6), Case.MT_CASE2)


def test_multitask_typed_case1b():
    r = rlct_multitask_typed(ModelDims(3, 3, 1, 2, 1), CAT_BIN)
    assert (r.lam, r.multiplicity) == (Fraction(7, 2), 2)


def test_composed_published():
    assert rlct_cbm_composed(ComposedDims(1, 5, 5, 1, 2)).lam == 15
    assert rlct_cbm_composed(ComposedDims(2, 1, 1, 1, 1)).lam == 3


def test_composed_matches_typed():
    c = ComposedDims(1, 5, 5, 1, 2)
    assert rlct_cbm_composed(c) == rlct_cbm_typed(ModelDims(1, 10, 3), CAT_REAL)
    assert rlct_multitask_composed(c, 3, 1) == rlct_multitask_typed(ModelDims(1, 10, 3, 3, 1), CAT_REAL)
    c2 = ComposedDims(3, 2, 1, 1, 1)
    assert rlct_multitask_composed(c2, 2, 1) == rlct_multitask_typed(ModelDims(3, 3, 2, 2, 1), CAT_REAL)


def test_composed_rejects_empty_block():
    with pytest.raises(InvalidDimsError):
        ComposedDims(1, 0, 1, 1, 1)


# --- comparison ---------------------------------------------------------------


def test_compare_case4_published():
    v = compare_models(ModelDims(1, 1, 2, 4, 1))
    assert v.relation is Relation.CBM_GREATER
    assert (v.lambda_cbm, v.lambda_multitask) == (Fraction(2), Fraction(3, 2))
    v = compare_models(ModelDims(2, 1, 1, 4, 2))
    assert v.relation is Relation.CBM_LEQ_MULTITASK


@pytest.mark.parametrize("t", [(1, 1, 1, 1, 0), (8, 8, 8, 8, 0), (3, 3, 1, 3, 1), (2, 2, 2, 3, 1)])
def test_compare_case1_against_exact(t):
    d = ModelDims(*t)
    v = compare_models(d)
    assert v.case in (Case.MT_CASE1A, Case.MT_CASE1B)
    assert (v.relation is Relation.CBM_GREATER) == (rlct_cbm(d).lam > rlct_multitask(d).lam)


def test_compare_detects_disagreement(monkeypatch):
    import slt_cbm.rlct as R

    monkeypatch.setattr(R, "_proposition_cbm_greater", lambda dims, case: True)
    with pytest.raises(ConsistencyError):
        R.compare_models(ModelDims(2, 1, 1, 4, 2))


def test_verdict_dict():
    d = compare_models(ModelDims(1, 1, 2, 4, 1)).to_dict()
    assert d["relation"] == "CbmGreater" and d["lambda_multitask"] == "3/2"


# --- asymptotic forms ---------------------------------------------------------------


def test_generalization_error_values():
    r = rlct_cbm(ModelDims(1, 10, 3))
    assert expected_generalization_error(r, 1000) == pytest.approx(0.0165)
    s = rlct_standard(2, 2, 2, 1)
    assert expected_generalization_error(s, 20) == pytest.approx(2 / 20 - 1 / (20 * math.log(20)))
    with pytest.raises(ValueError):
        expected_generalization_error(r, 2)


@given(st.integers(3, 10**6))
def test_generalization_error_decreasing(n):
    s = rlct_standard(2, 2, 2, 1)
    assert expected_generalization_error(s, n + 1) < expected_generalization_error(s, n)


def test_free_energy_values():
    one = rlct_cbm(ModelDims(1, 1, 1))
    assert free_energy_penalty(one, math.e) == pytest.approx(1.0)
    s = rlct_standard(2, 2, 2, 1)
    assert free_energy_penalty(s, math.exp(math.e)) == pytest.approx(2 * math.e - 1)
    big = rlct_cbm(ModelDims(1, 10, 3))
    assert free_energy_penalty(big, 1000) == pytest.approx(16.5 * math.log(1000))


@given(st.fractions(min_value=Fraction(1, 8), max_value=100).filter(lambda f: 8 % f.denominator == 0))
def test_fraction_round_trip(f):
    assert parse_fraction(format_fraction(f)) == f


def test_result_dict():
    assert rlct_cbm(ModelDims(1, 10, 3)).to_dict() == {
        "lambda": "33/2",
        "lambda_float": 16.5,
        "multiplicity": 1,
        "case": "Regular",
    }
