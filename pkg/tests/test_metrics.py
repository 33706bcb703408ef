import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedarch.metrics import (
    INF,
    ForgettingTrace,
    accuracy_from_logits,
    evaluate,
    forgetting_drop,
    format_number,
    record_forgetting,
    rounds_to_target,
    target_from_baseline,
    transmitted_size,
)
from fedarch.models import ModelSpec, build_model

LINEAR = ModelSpec(arch="mlp", image_size=1, channels=10, num_classes=10, hidden=())


@pytest.fixture
def linear():
    """Single linear layer whose logits are set directly through its weights."""
    model = build_model(LINEAR)
    model.params["head.weight"].data[:] = 0
    model.params["head.bias"].data[:] = 0
    return model


def one_hot_images(labels):
    return np.eye(10, dtype=np.float32)[labels].reshape(-1, 10, 1, 1)


def brute_accuracy(logits, labels):
    hits = 0
    for row, y in zip(logits, labels):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        hits += best == y
    return hits / len(labels)


class TestEvaluate:
    def test_one_hot_logits_give_perfect_accuracy(self, linear):
        linear.params["head.weight"].data[:] = np.eye(10, dtype=np.float32)
        labels = np.arange(40) % 10
        assert evaluate(linear, one_hot_images(labels), labels) == 1.0

    def test_constant_logits_pick_lowest_class(self, linear):
        labels = np.arange(50) % 10
        assert evaluate(linear, one_hot_images(labels), labels) == pytest.approx(0.1)

    def test_empty_set(self, linear):
        with pytest.raises(ValueError):
            evaluate(linear, np.zeros((0, 10, 1, 1), dtype=np.float32), np.zeros(0, dtype=int))

    def test_restores_training_flag(self, linear):
        linear.train()
        evaluate(linear, one_hot_images([1, 2]), np.array([1, 2]))
        assert linear.training

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 40))
    def test_matches_brute_force_argmax(self, seed, n):
        rng = np.random.default_rng(seed)
        # small integer logits force ties
        logits = rng.integers(-2, 3, size=(n, 6)).astype(np.float64)
        labels = rng.integers(0, 6, n)
        assert accuracy_from_logits(logits, labels) == brute_accuracy(logits, labels)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        logits, labels = rng.standard_normal((30, 4)), rng.integers(0, 4, 30)
        perm = rng.permutation(30)
        assert accuracy_from_logits(logits, labels) == accuracy_from_logits(logits[perm], labels[perm])


class TestRoundsToTarget:
    def test_example_trace(self):
        assert rounds_to_target([0.50, 0.80, 0.92], 0.915) == 3

    def test_first_round(self):
        assert rounds_to_target([0.99, 0.2], 0.9) == 1

    def test_never_reached(self):
        r = rounds_to_target([0.1, 0.2], 0.5)
        assert r == INF and format_number(r) == "inf"

    def test_empty_trace(self):
        assert rounds_to_target([], 0.5) == INF

    @pytest.mark.parametrize("target", [0.0, -0.1, 1.01])
    def test_invalid_target(self, target):
        with pytest.raises(ValueError):
            rounds_to_target([0.5], target)

    def test_target_from_baseline(self):
        assert target_from_baseline(0.964) == pytest.approx(0.9158)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), max_size=20), st.floats(0.01, 1), st.floats(0.01, 1))
    def test_monotone_in_target(self, trace, a, b):
        lo, hi = sorted((a, b))
        assert rounds_to_target(trace, lo) <= rounds_to_target(trace, hi)


class TestTransmittedSize:
    def test_table_number_format(self):
        assert transmitted_size(4, 21_400_000) == 85_600_000

    def test_zero_rounds(self):
        assert transmitted_size(0, 12345) == 0

    def test_detailed_mode(self):
        assert transmitted_size(1, 100, participants=3) == 600

    def test_detailed_mode_per_round_counts(self):
        assert transmitted_size(2, 10, participants=[1, 4]) == 100

    def test_infinite_rounds(self):
        assert transmitted_size(INF, 10) == INF

    def test_negative(self):
        with pytest.raises(ValueError):
            transmitted_size(-1, 10)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 10**9))
    def test_exactly_multiplicative(self, rounds, params):
        assert transmitted_size(rounds, params) == rounds * params


class TestForgetting:
    def test_append_one_row(self):
        trace = record_forgetting(ForgettingTrace(2), 0, 0, [0.9, 0.1])
        assert len(trace.rows) == 1

    def test_rows_in_visit_order(self):
        trace = ForgettingTrace(2)
        for visit in range(4):
            trace = record_forgetting(trace, visit, visit % 2, [0.5, 0.5])
        assert [r[0] for r in trace.rows] == [0, 1, 2, 3]
        assert [r[1] for r in trace.rows] == [0, 1, 0, 1]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            record_forgetting(ForgettingTrace(3), 0, 0, [0.5, 0.5])

    def test_visit_must_increase(self):
        trace = record_forgetting(ForgettingTrace(1), 3, 0, [0.5])
        with pytest.raises(ValueError):
            record_forgetting(trace, 3, 0, [0.5])

    def test_drop_after_next_visit(self):
        trace = ForgettingTrace(2)
        for visit, (acc0, acc1) in enumerate([(0.98, 0.0), (0.01, 0.97), (0.9, 0.02), (0.3, 0.95)]):
            trace = record_forgetting(trace, visit, visit % 2, [acc0, acc1])
        assert forgetting_drop(trace, 0) == pytest.approx(0.97)
        assert forgetting_drop(trace, 1) == pytest.approx(0.95)


class TestFormatNumber:
    @pytest.mark.parametrize(
        "value, text",
        [(3, "3"), (np.int64(7), "7"), (0.1, "0.1"), (math.inf, "inf"), (math.nan, "nan"), (None, ""), (True, "1")],
    )
    def test_values(self, value, text):
        assert format_number(value) == text

    @settings(max_examples=100)
    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_round_trip(self, x):
        assert float(format_number(x)) == x
