import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gajourney.attribution import (
    Attribution,
    build_labels,
    indicator_matrix,
    linear_attribution,
    time_decay_attribution,
)


def partial_sum_oracle(v):
    return [sum(v[: n + 1]) / (n + 1) for n in range(len(v))]


def weighted_oracle(v, base=2.0):
    """Direct evaluation: weights recomputed for every prefix."""
    out = []
    for n in range(1, len(v) + 1):
        w = [base ** -(n - i) for i in range(1, n + 1)]
        out.append(sum(wi * vi for wi, vi in zip(w, v[:n])) / sum(w))
    return out


class TestLinear:
    def test_worked_example(self):
        t = linear_attribution([0, 1, 0, 0, 1])
        np.testing.assert_allclose(t, [0, 1 / 2, 1 / 3, 1 / 4, 2 / 5], atol=1e-12)
        # the rounded values printed alongside it
        np.testing.assert_allclose(t, [0, 0.5, 0.33, 0.25, 0.4], atol=0.005)

    def test_zero_column(self):
        assert linear_attribution([0, 0, 0]).tolist() == [0, 0, 0]

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=8))
    def test_matches_partial_sums(self, v):
        np.testing.assert_array_equal(linear_attribution(v), partial_sum_oracle(v))


class TestTimeDecay:
    def test_prefix_values(self):
        t = time_decay_attribution([0, 1, 0, 0, 1])
        np.testing.assert_allclose(t[:4], [0, 2 / 3, 2 / 7, 2 / 15], atol=1e-12)
        # rounded to two places as printed; the printed values are truncated
        np.testing.assert_allclose(t[:4], [0, 0.66, 0.28, 0.13], atol=0.01)

    def test_shifted_example(self):
        t = time_decay_attribution([0, 0, 1, 0, 1])
        assert t[4] == pytest.approx(1.25 / 1.9375, abs=1e-12)
        assert round(t[4], 2) == 0.65

    def test_last_value_follows_formula(self):
        # direct evaluation gives 0.5806..., not the 0.55 printed in the worked example
        t = time_decay_attribution([0, 1, 0, 0, 1])
        assert t[4] == pytest.approx(1.125 / 1.9375, abs=1e-12)

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=10), st.sampled_from([1.5, 2.0, 3.0]))
    def test_matches_direct_formula(self, v, base):
        np.testing.assert_allclose(time_decay_attribution(v, base=base), weighted_oracle(v, base), atol=1e-12)

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=10))
    def test_unit_base_is_linear(self, v):
        np.testing.assert_allclose(time_decay_attribution(v, base=1.0), linear_attribution(v), atol=1e-15)


class TestBuildLabels:
    def test_single_transaction_session(self):
        for model in Attribution:
            np.testing.assert_array_equal(build_labels([5], model), [[0, 0, 0, 0, 0, 1]])

    def test_two_step_linear(self):
        np.testing.assert_allclose(build_labels([0, 5], "linear"), [[1, 0, 0, 0, 0, 0], [0.5, 0, 0, 0, 0, 0.5]])

    @pytest.mark.parametrize("model", list(Attribution))
    def test_column_decomposition(self, model):
        rng = np.random.default_rng(3)
        ids = rng.integers(0, 6, size=6)
        labels = build_labels(ids, model)
        oracle = partial_sum_oracle if model is Attribution.LINEAR else weighted_oracle
        for c in range(6):
            np.testing.assert_allclose(labels[:, c], oracle((ids == c).astype(int).tolist()), atol=1e-12)

    @settings(max_examples=200)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=15), st.sampled_from(list(Attribution)))
    def test_rows_sum_to_one_and_in_range(self, ids, model):
        labels = build_labels(ids, model)
        np.testing.assert_allclose(labels.sum(axis=1), 1.0, atol=1e-12)
        assert ((labels >= 0) & (labels <= 1)).all()

    @given(st.lists(st.integers(0, 5), min_size=2, max_size=12), st.sampled_from(list(Attribution)), st.data())
    def test_causal(self, ids, model, data):
        n = data.draw(st.integers(1, len(ids)))
        np.testing.assert_array_equal(build_labels(ids, model)[:n], build_labels(ids[:n], model))

    @pytest.mark.parametrize("model", list(Attribution))
    def test_all_ones_column(self, model):
        labels = build_labels([3] * 7, model)
        np.testing.assert_allclose(labels[:, 3], 1.0)

    def test_indicator_rejects_bad_ids(self):
        with pytest.raises(ValueError):
            indicator_matrix([0, 6])
        with pytest.raises(ValueError):
            indicator_matrix([])

    def test_parse_names(self):
        assert Attribution.parse("time_decay") is Attribution.TIME_DECAY
        assert Attribution.parse("Linear") is Attribution.LINEAR
        with pytest.raises(ValueError):
            Attribution.parse("first-click")
