import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcgra2seq.posenc import (RelativePEBank, absolute_pe, absolute_pe_table, offset_incidence,
                              pe_tables_for_graph, relative_pe)


def direct_pe(pos, dim):
    # scalar-by-scalar evaluation with math.* as the oracle
    out = []
    for d in range(dim // 2):
        angle = pos / 10000.0 ** (2 * d / dim)
        out += [math.sin(angle), math.cos(angle)]
    return np.array(out)


def test_position_zero_alternates():
    np.testing.assert_array_equal(absolute_pe(0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_hand_values():
    assert absolute_pe(1, 4)[0] == pytest.approx(0.841471, abs=1e-6)
    np.testing.assert_allclose(absolute_pe(2, 4)[:2], [0.909297, -0.416147], atol=1e-6)


@given(st.integers(0, 64), st.integers(1, 256).map(lambda k: 2 * k))
@settings(max_examples=80, deadline=None)
def test_matches_direct_evaluation(pos, dim):
    got = absolute_pe(pos, dim)
    assert got.dtype == np.float64
    assert np.max(np.abs(got - direct_pe(pos, dim))) <= 1e-12
    assert np.all(np.abs(got) <= 1)


def test_rejects_odd_dim_and_negative_position():
    with pytest.raises(ValueError, match="even"):
        absolute_pe(1, 7)
    with pytest.raises(ValueError, match="pos"):
        absolute_pe(-1, 8)


def test_table_rows():
    table = absolute_pe_table(10, 6)
    for pos in range(10):
        np.testing.assert_array_equal(table[pos], absolute_pe(pos, 6))


def test_graph_table_has_zero_placeholder_row():
    t = pe_tables_for_graph(1, 6, np.float64)
    assert t.shape == (2, 6)
    np.testing.assert_array_equal(t[0], 0)
    np.testing.assert_array_equal(t[1], absolute_pe(1, 6))
    t = pe_tables_for_graph(20, 16, np.float64)
    for m in range(1, 21):
        np.testing.assert_array_equal(t[m], absolute_pe(m, 16))


# -- relative bank -------------------------------------------------------------------

@pytest.fixture
def bank():
    return RelativePEBank(10, 8, np.random.default_rng(0))


def test_offset_examples(bank):
    assert relative_pe(3, 5, bank) is relative_pe(7, 9, bank)
    assert relative_pe(2, 5, bank) is relative_pe(5, 2, bank)
    assert relative_pe(0, 4, bank) is bank.placeholder
    assert relative_pe(4, 0, bank) is bank.placeholder


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 9))
@settings(max_examples=200, deadline=None)
def test_target_invariant_and_undirected_storage(i, j, k):
    b = RelativePEBank(10, 4, np.random.default_rng(1))
    if i + k <= 10 and j + k <= 10:
        assert b.lookup(i, i + k) is b.lookup(j, j + k)
    assert b.lookup(i, j) is b.lookup(j, i)
    assert b.lookup(i, j) is b.offsets[abs(i - j)]


def test_out_of_range_rejected(bank):
    with pytest.raises(IndexError):
        bank.lookup(11, 1)
    with pytest.raises(IndexError):
        bank.lookup(-1, 1)


def test_placeholder_is_not_a_parameter(bank):
    names = dict(bank.named_parameters())
    assert len(names) == 10
    assert all(p is not bank.placeholder for p in names.values())
    assert not bank.placeholder.requires_grad
    np.testing.assert_array_equal(bank.placeholder.data, 0)


def test_init_scale():
    b = RelativePEBank(20, 512, np.random.default_rng(0))
    assert np.std(b.matrix().data) == pytest.approx(0.02, rel=0.05)


def test_incidence_matches_offsets():
    m = 5
    inc = offset_incidence(m)
    assert inc.shape == (m + 1, m + 1, m)
    for i in range(m + 1):
        for j in range(m + 1):
            expected = np.zeros(m)
            if i and j:
                expected[abs(i - j)] = 1
            np.testing.assert_array_equal(inc[i, j], expected)
