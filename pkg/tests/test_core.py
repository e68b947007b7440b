"""Unit geometry helpers and the canonical label encoding."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nclust.core import (
    DegenerateInput,
    EmbeddingSequence,
    MeetingRecord,
    average_embedding,
    canonicalize,
    is_canonical,
    l2_normalize,
    relabel_equivalent,
)


def unit_rows(n, dim, rng):
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-12)

    def test_already_unit(self):
        v = np.zeros(8)
        v[0] = 1.0
        np.testing.assert_allclose(l2_normalize(v), v, atol=1e-12)

    def test_zero_vector_degenerate(self):
        with pytest.raises(DegenerateInput):
            l2_normalize([0.0, 0.0])

    def test_non_finite_degenerate(self):
        with pytest.raises(DegenerateInput):
            l2_normalize([np.nan, 1.0])

    @given(st.integers(0, 2**32 - 1))
    def test_result_is_unit_and_parallel(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(5)
        if np.linalg.norm(v) == 0:
            return
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12
        assert abs(float(u @ v) - np.linalg.norm(v)) < 1e-9


class TestAverageEmbedding:
    def test_single_row_identity(self):
        r = l2_normalize([1.0, 2.0, 2.0])
        np.testing.assert_allclose(average_embedding(r[None, :]), r, atol=1e-12)

    def test_two_orthogonal(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        expected = np.array([np.sqrt(2) / 2, np.sqrt(2) / 2])
        np.testing.assert_allclose(average_embedding(rows), expected, atol=1e-12)

    def test_antipodal_cancellation(self):
        rows = np.array([[1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(DegenerateInput):
            average_embedding(rows)

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            average_embedding(np.array([[0.5, 0.0], [0.0, 1.0]]))

    def test_mean_direction(self):
        rng = np.random.default_rng(7)
        rows = unit_rows(20, 6, rng)
        rows[:, 0] = np.abs(rows[:, 0]) + 1.0  # common positive component
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        avg = average_embedding(rows)
        mean = rows.mean(axis=0)
        np.testing.assert_allclose(avg, mean / np.linalg.norm(mean), atol=1e-12)


class TestCanonicalize:
    def test_paper_example_one(self):
        ids = list("EACAEEC")
        assert canonicalize(ids) == (1, 2, 3, 2, 1, 1, 3)

    def test_paper_example_two(self):
        ids = list("ACABBCDBD")
        assert canonicalize(ids) == (1, 2, 1, 3, 3, 2, 4, 3, 4)

    def test_single_cluster(self):
        assert canonicalize(list("XXX")) == (1, 1, 1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            canonicalize([])

    @given(st.lists(st.sampled_from("ABCDEFG"), min_size=1, max_size=30))
    def test_output_is_canonical(self, ids):
        assert is_canonical(canonicalize(ids))

    @given(
        st.lists(st.sampled_from("ABCDEFG"), min_size=1, max_size=30),
        st.permutations(list("ABCDEFG")),
    )
    def test_renaming_invariance(self, ids, perm):
        renamed = [perm["ABCDEFG".index(z)] for z in ids]
        assert canonicalize(renamed) == canonicalize(ids)


class TestIsCanonical:
    def test_must_start_at_one(self):
        assert not is_canonical((2, 1))

    def test_no_gaps(self):
        assert not is_canonical((1, 3))

    def test_empty_false(self):
        assert not is_canonical(())

    def test_valid_examples(self):
        assert is_canonical((1,))
        assert is_canonical((1, 2, 3, 2, 1, 1, 3))


class TestRelabelEquivalent:
    def test_label_swap(self):
        assert relabel_equivalent((1, 2, 1), (2, 1, 2))

    def test_different_partition(self):
        assert not relabel_equivalent((1, 2, 1), (1, 1, 1))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            relabel_equivalent((1, 2), (1, 2, 3))

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=20))
    def test_canonicalization_is_equivalent(self, labels):
        canon = canonicalize([str(v) for v in labels])
        assert relabel_equivalent(labels, canon)


class TestEmbeddingSequence:
    def test_accepts_unit_rows(self):
        rows = unit_rows(4, 8, np.random.default_rng(0))
        seq = EmbeddingSequence(rows)
        assert seq.n == 4 and seq.dim == 8

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError, match="norm"):
            EmbeddingSequence(np.full((2, 4), 0.1))

    def test_scaled_rows_allowed(self):
        rows = unit_rows(3, 4, np.random.default_rng(1)) * 2.0
        assert EmbeddingSequence(rows, scaled=True).n == 3

    def test_rejects_one_dim(self):
        with pytest.raises(ValueError):
            EmbeddingSequence(np.ones((3, 1)))

    def test_rejects_non_finite(self):
        rows = unit_rows(2, 4, np.random.default_rng(2))
        rows[0, 0] = np.inf
        with pytest.raises(ValueError):
            EmbeddingSequence(rows, scaled=True)


class TestMeetingRecord:
    def make(self, n=3, ids=("A", "B", "A")):
        rows = unit_rows(n, 4, np.random.default_rng(3))
        spans = tuple((float(i), float(i) + 1.0) for i in range(n))
        return MeetingRecord(EmbeddingSequence(rows), ids, spans, "m1")

    def test_labels_are_canonical_identities(self):
        record = self.make()
        assert record.labels() == (1, 2, 1)
        assert record.speakers == ("A", "B")

    def test_mismatched_identities(self):
        rows = unit_rows(3, 4, np.random.default_rng(4))
        with pytest.raises(ValueError):
            MeetingRecord(
                EmbeddingSequence(rows), ("A", "B"), ((0, 1), (1, 2), (2, 3))
            )

    def test_overlapping_spans_rejected(self):
        rows = unit_rows(2, 4, np.random.default_rng(5))
        with pytest.raises(ValueError, match="overlap"):
            MeetingRecord(
                EmbeddingSequence(rows), ("A", "B"), ((0.0, 2.0), (1.0, 3.0))
            )

    def test_empty_span_rejected(self):
        rows = unit_rows(1, 4, np.random.default_rng(6))
        with pytest.raises(ValueError):
            MeetingRecord(EmbeddingSequence(rows), ("A",), ((1.0, 1.0),))
