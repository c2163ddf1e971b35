import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulsesort.core import (
    TERMINAL,
    AssignmentMatrix,
    ClusterSet,
    InfeasibleAssignmentError,
    PulseSequence,
    RtoaSequence,
    assignment_to_clusters,
    clusters_to_assignment,
    compute_rtoa,
    labels_to_assignment,
    links_to_assignment,
    normalize_sequence,
)


class TestPulseSequence:
    def test_basic(self):
        seq = PulseSequence(np.array([0.0, 5.0, 12.0, 20.0]))
        assert seq.n == 4
        assert not seq.toas.flags.writeable

    def test_rejects_decreasing(self):
        with pytest.raises(ValueError):
            PulseSequence(np.array([0.0, 5.0, 3.0]))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PulseSequence(np.array([]))

    def test_ties_allowed(self):
        seq = PulseSequence(np.array([3.0, 3.0, 10.0]))
        assert seq.n == 3

    def test_labels_length_checked(self):
        with pytest.raises(ValueError):
            PulseSequence(np.array([0.0, 1.0]), labels=np.array([0]))


class TestComputeRtoa:
    def test_example(self):
        r = compute_rtoa(PulseSequence(np.array([0.0, 5.0, 12.0, 20.0])))
        np.testing.assert_array_equal(r.rtoas, [0.0, 5.0, 7.0, 8.0])

    def test_single_pulse(self):
        r = compute_rtoa(PulseSequence(np.array([7.0])))
        np.testing.assert_array_equal(r.rtoas, [0.0])

    def test_simultaneous(self):
        r = compute_rtoa(PulseSequence(np.array([3.0, 3.0, 10.0])))
        np.testing.assert_array_equal(r.rtoas, [0.0, 0.0, 7.0])


class TestAssignmentMatrix:
    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            AssignmentMatrix(np.zeros((3, 3)))

    def test_rejects_backward_link(self):
        values = np.zeros((2, 3))
        values[0, 0] = 1.0
        values[1, 2] = 1.0
        with pytest.raises(ValueError):
            AssignmentMatrix(values, kind="hard")

    def test_rejects_doubly_claimed_column(self):
        values = np.zeros((3, 4))
        values[0, 2] = 1.0
        values[1, 2] = 1.0
        values[2, 3] = 1.0
        with pytest.raises(InfeasibleAssignmentError):
            AssignmentMatrix(values, kind="hard")

    def test_terminal_column_unbounded(self):
        # every row may link to terminal
        values = np.zeros((3, 4))
        values[:, 3] = 1.0
        a = AssignmentMatrix(values, kind="hard")
        np.testing.assert_array_equal(a.links(), [TERMINAL] * 3)

    def test_soft_rows_must_sum_to_one(self):
        values = np.zeros((2, 3))
        values[0, 1] = 0.5
        values[0, 2] = 0.2
        values[1, 2] = 1.0
        with pytest.raises(ValueError):
            AssignmentMatrix(values, kind="soft")


class TestLabelsToAssignment:
    def test_alternating(self):
        seq = PulseSequence(
            np.array([0.0, 1.0, 2.0, 3.0]), labels=np.array([0, 1, 0, 1])
        )
        a = labels_to_assignment(seq)
        np.testing.assert_array_equal(a.links(), [2, 3, TERMINAL, TERMINAL])

    def test_single_emitter(self):
        seq = PulseSequence(np.array([0.0, 1.0, 2.0]), labels=np.array([5, 5, 5]))
        a = labels_to_assignment(seq)
        np.testing.assert_array_equal(a.links(), [1, 2, TERMINAL])

    def test_all_distinct(self):
        seq = PulseSequence(np.array([0.0, 1.0, 2.0]), labels=np.array([0, 1, 2]))
        a = labels_to_assignment(seq)
        np.testing.assert_array_equal(a.links(), [TERMINAL] * 3)

    def test_requires_labels(self):
        with pytest.raises(ValueError):
            labels_to_assignment(PulseSequence(np.array([0.0, 1.0])))


class TestAssignmentToClusters:
    def test_two_chains(self):
        a = links_to_assignment([2, 3, TERMINAL, TERMINAL], 4)
        c = assignment_to_clusters(a)
        assert c.chains == ((0, 2), (1, 3))

    def test_round_trip(self):
        links = [1, 4, TERMINAL, TERMINAL, TERMINAL]
        a = links_to_assignment(links, 5)
        back = clusters_to_assignment(assignment_to_clusters(a))
        np.testing.assert_array_equal(back.values, a.values)

    def test_all_terminal_gives_singletons(self):
        a = links_to_assignment([TERMINAL, TERMINAL, TERMINAL], 3)
        c = assignment_to_clusters(a)
        assert c.chains == ((0,), (1,), (2,))


class TestClusterSet:
    def test_rejects_overlap(self):
        with pytest.raises(ValueError):
            ClusterSet(((0, 1), (1, 2)))

    def test_rejects_gap(self):
        with pytest.raises(ValueError):
            ClusterSet(((0,), (2,)))

    def test_rejects_unordered_chain(self):
        with pytest.raises(ValueError):
            ClusterSet(((1, 0),))


class TestNormalizeSequence:
    def test_example(self):
        r = RtoaSequence(np.array([0.0, 5.0, 10.0]))
        np.testing.assert_allclose(normalize_sequence(r), [0.0, 0.5, 1.0])

    def test_all_zero(self):
        r = RtoaSequence(np.array([0.0, 0.0]))
        np.testing.assert_array_equal(normalize_sequence(r), [0.0, 0.0])

    def test_max_is_one(self):
        r = RtoaSequence(np.array([0.0, 3.0, 1.0, 7.0]))
        assert np.max(normalize_sequence(r)) == 1.0


@st.composite
def label_vectors(draw):
    n = draw(st.integers(min_value=1, max_value=64))
    return draw(
        st.lists(st.integers(min_value=0, max_value=9), min_size=n, max_size=n)
    )


@given(label_vectors())
@settings(max_examples=200, deadline=None)
def test_label_round_trip(labels):
    # labels -> assignment -> clusters recovers exactly the groups of equal
    # labels, each in time order
    seq = PulseSequence(np.arange(len(labels), dtype=float), labels=np.array(labels))
    a = labels_to_assignment(seq)
    assert a.kind == "hard"
    clusters = assignment_to_clusters(a)
    expected = {}
    for i, lab in enumerate(labels):
        expected.setdefault(lab, []).append(i)
    assert sorted(clusters.chains) == sorted(tuple(v) for v in expected.values())


@given(label_vectors())
@settings(max_examples=100, deadline=None)
def test_labels_assignment_invariants(labels):
    a = labels_to_assignment(
        PulseSequence(np.arange(len(labels), dtype=float), labels=np.array(labels))
    )
    n = a.n
    assert a.values.shape == (n, n + 1)
    assert np.all(a.values.sum(axis=1) == 1)
    assert np.all(a.values[:, :n].sum(axis=0) <= 1)
    # forward-only
    assert np.all(np.tril(a.values[:, :n]) == 0)
