import math

import mpmath
import pytest
from hypothesis import assume, given, strategies as st

from sigfuse.stats import (
    ONE,
    PValue,
    bh_adjust,
    bh_adjust_pvalues,
    chi_square_p,
    chi_square_p_from_statistic,
    chi_square_statistic,
    decision_cosine_distance,
    fisher_exact_two_sided,
    odds_ratio,
    selected_test,
)

from fisher_oracle import all_tables, fisher_oracle


def test_fisher_matches_enumeration_oracle_exhaustively():
    worst = 0.0
    for table in all_tables(12):
        got = fisher_exact_two_sided(*table).value
        want = float(fisher_oracle(*table))
        worst = max(worst, abs(got - want))
    assert worst <= 1e-12


def test_fisher_known_values():
    assert fisher_exact_two_sided(3, 1, 1, 3).value == pytest.approx(0.4857142857142857, abs=1e-15)
    assert fisher_exact_two_sided(0, 0, 0, 0) == ONE
    assert fisher_exact_two_sided(5, 0, 0, 5).value == pytest.approx(2 / 252, abs=1e-15)


def test_fisher_far_tail_keeps_log():
    p = fisher_exact_two_sided(2000, 10, 10, 2000)
    assert p.underflow and p.value == 0.0 and p.log10 < -300
    assert p.to_json() == "<1e-300" and p.display() == "<1e-300"
    # oracle in exact arithmetic, compared on the log scale
    small = fisher_exact_two_sided(300, 10, 10, 300)
    want = float(mpmath.log10(mpmath.mpf(fisher_oracle(300, 10, 10, 300).numerator)
                              / fisher_oracle(300, 10, 10, 300).denominator))
    assert small.log10 == pytest.approx(want, abs=1e-6)


def test_chi_square_small_example():
    assert chi_square_statistic(20, 5, 5, 20) == pytest.approx(18.0, abs=1e-12)
    assert chi_square_p(20, 5, 5, 20).value == pytest.approx(float(mpmath.erfc(mpmath.sqrt(9))), rel=1e-12)


@pytest.mark.parametrize("x", [0.5, 3.84, 50.0, 700.0, 1200.0])
def test_chi_square_tail_against_mpmath(x):
    want = mpmath.log10(mpmath.erfc(mpmath.sqrt(mpmath.mpf(x) / 2)))
    got = chi_square_p_from_statistic(x)
    assert got.log10 == pytest.approx(float(want), abs=1e-9)


def test_chi_square_statistic_of_700_is_not_below_double_range():
    p = chi_square_p_from_statistic(700.0)
    assert not p.underflow and p.value == pytest.approx(2.99e-154, rel=1e-2)


def test_chi_square_statistic_of_1400_is_flagged():
    p = chi_square_p_from_statistic(1400.0)
    assert p.underflow and p.to_json() == "<1e-300"


def test_chi_square_proportional_table():
    assert chi_square_statistic(10, 10, 10, 10) == 0.0
    assert chi_square_p(10, 10, 10, 10).value == 1.0


def test_chi_square_degenerate_margins():
    assert chi_square_p(0, 0, 3, 4) == ONE
    assert chi_square_statistic(5, 0, 5, 0) == 0.0


def test_selected_test_switches_on_small_cells():
    assert selected_test(20, 5, 5, 20)[0] == "chi_square"
    assert selected_test(20, 4, 5, 20)[0] == "fisher"


def test_odds_ratio():
    o = odds_ratio(20, 5, 5, 20)
    assert o.value == 16.0 and not o.infinite
    se = math.sqrt(1 / 20 + 1 / 5 + 1 / 5 + 1 / 20)
    assert o.ci_low == pytest.approx(16 * math.exp(-1.959963984540054 * se), rel=1e-12)
    assert o.ci_high == pytest.approx(16 * math.exp(1.959963984540054 * se), rel=1e-12)
    inf = odds_ratio(10, 0, 5, 20)
    assert inf.infinite and inf.value is None and inf.display() == "inf (div. by 0)"
    assert odds_ratio(0, 0, 5, 20).display() == "undefined"
    assert odds_ratio(0, 3, 5, 20).value == 0.0
    with pytest.raises(ValueError):
        odds_ratio(-1, 2, 3, 4)


def test_bh_examples():
    assert bh_adjust([0.01, 0.04, 0.03, 0.2]) == pytest.approx([0.04, 0.16 / 3, 0.16 / 3, 0.2])
    assert bh_adjust([0.01, 0.02, 0.03]) == pytest.approx([0.03, 0.03, 0.03])
    assert bh_adjust([0.5]) == [0.5]
    assert bh_adjust([]) == []
    assert bh_adjust([0.9, 0.95]) == pytest.approx([0.95, 0.95])


def test_bh_log_space_matches_float_space():
    ps = [0.001, 0.2, 0.03, 0.5, 0.0004, 0.04]
    floats = bh_adjust(ps)
    logs = bh_adjust_pvalues([PValue.from_log(math.log(p)) for p in ps])
    assert [x.value for x in logs] == pytest.approx(floats, rel=1e-12)


def test_bh_log_space_below_double_range():
    tiny = [PValue.from_log(-2000 * math.log(10)), PValue.from_log(-800 * math.log(10))]
    adj = bh_adjust_pvalues(tiny)
    assert adj[0].log10 == pytest.approx(-2000 + math.log10(2))
    assert adj[1].log10 == pytest.approx(-800)
    assert bh_adjust(tiny) == pytest.approx([2e-300, 1e-300])


probs = st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=30)


@given(probs)
def test_bh_properties(ps):
    adj = bh_adjust(ps)
    assert all(a >= p - 1e-15 and a <= 1.0 for a, p in zip(adj, ps))
    order = sorted(range(len(ps)), key=lambda i: ps[i])
    ranked = [adj[i] for i in order]
    assert all(x <= y + 1e-15 for x, y in zip(ranked, ranked[1:]))


@given(probs, st.randoms())
def test_bh_is_permutation_equivariant(ps, rnd):
    perm = list(range(len(ps)))
    rnd.shuffle(perm)
    adj = bh_adjust(ps)
    assert bh_adjust([ps[i] for i in perm]) == pytest.approx([adj[i] for i in perm])


cells = st.integers(0, 40)


@given(cells, cells, cells, cells)
def test_fisher_is_symmetric_under_transpose_and_flip(a, b, c, d):
    p = fisher_exact_two_sided(a, b, c, d).value
    assert fisher_exact_two_sided(a, c, b, d).value == pytest.approx(p, rel=1e-9, abs=1e-300)
    assert fisher_exact_two_sided(d, c, b, a).value == pytest.approx(p, rel=1e-9, abs=1e-300)
    assert 0.0 <= p <= 1.0


def test_cosine_unit_cases():
    assert decision_cosine_distance([1, 0, 1], [1, 0, 1]) == 0.0
    assert decision_cosine_distance([1, 0], [0, 1]) == 1.0
    got = decision_cosine_distance([1, 1, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0])
    assert abs(got - (1 - 1 / math.sqrt(2))) < 1e-12
    assert decision_cosine_distance([0, 0], [1, 0]) is None
    assert decision_cosine_distance([1, 0], [0, 0]) is None
    with pytest.raises(ValueError):
        decision_cosine_distance([1], [1, 0])


@given(st.lists(st.integers(0, 1), min_size=6, max_size=6), st.lists(st.integers(0, 1), min_size=6, max_size=6))
def test_cosine_on_binary_vectors_is_bounded_and_symmetric(u, v):
    assume(any(u) and any(v))
    d = decision_cosine_distance(u, v)
    assert 0.0 <= d <= 1.0
    assert d == decision_cosine_distance(v, u)
