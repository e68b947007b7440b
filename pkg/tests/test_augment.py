"""Augmentation: rotations, slicing, input randomisation, training sets."""

import math

import numpy as np
import pytest
from scipy import stats

from nclust.augment import (
    AugmentConfig,
    EmbeddingPool,
    RotationMatrix,
    build_training_set,
    diaconis_augment,
    randomize_inputs,
    sample_rotation,
    scale_variance,
    split_for_eval,
    sub_sequence,
)
from nclust.core import EmbeddingSequence, MeetingRecord, canonicalize
from nclust.synth import gen_corpus


def make_meeting(identities, dim=4, seed=0, meeting_id="m"):
    """Meeting with random unit embeddings and consecutive unit spans."""
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((len(identities), dim))
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    spans = tuple((float(i), float(i + 1)) for i in range(len(identities)))
    return MeetingRecord(
        embeddings=EmbeddingSequence(data),
        identities=tuple(identities),
        spans=spans,
        meeting_id=meeting_id,
    )


class TestRotationSampling:
    @pytest.mark.parametrize("dim", [2, 3, 8, 33])
    def test_special_orthogonal(self, dim):
        rot = sample_rotation(dim, np.random.default_rng(dim))
        r = rot.data
        assert np.max(np.abs(r.T @ r - np.eye(dim))) < 1e-8
        assert np.max(np.abs(r @ r.T - np.eye(dim))) < 1e-8
        assert abs(np.linalg.det(r) - 1.0) < 1e-6

    def test_deterministic(self):
        a = sample_rotation(6, np.random.default_rng(3))
        b = sample_rotation(6, np.random.default_rng(3))
        np.testing.assert_array_equal(a.data, b.data)

    def test_image_of_basis_vector_is_centred(self):
        # Under Haar measure R @ e1 is uniform on the sphere, so the
        # empirical mean shrinks like 1/sqrt(dim * n).
        dim, n = 8, 10_000
        rng = np.random.default_rng(17)
        total = np.zeros(dim)
        firsts = np.empty(n)
        for i in range(n):
            row = sample_rotation(dim, rng).data[0]
            total += row
            firsts[i] = row[0]
        assert np.max(np.abs(total / n)) < 4.0 / math.sqrt(dim * n)
        # First coordinate of a uniform point on S^{D-1}: x = 2 B - 1
        # with B ~ Beta((D-1)/2, (D-1)/2).
        a = (dim - 1) / 2.0
        result = stats.kstest(firsts, lambda x: stats.beta.cdf((x + 1) / 2, a, a))
        assert result.pvalue > 0.01

    def test_dim_one_rejected(self):
        with pytest.raises(ValueError):
            sample_rotation(1, np.random.default_rng(0))

    def test_validation(self):
        with pytest.raises(ValueError):
            RotationMatrix(np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            RotationMatrix(np.diag([1.0, -1.0]))  # reflection


class TestSubSequence:
    def test_worked_example(self):
        meeting = make_meeting(["E", "A", "C", "A", "E", "E", "C"])
        piece = sub_sequence(meeting, 2, 5)
        assert piece.identities == ("A", "C", "A", "E")
        assert canonicalize(piece.identities) == (1, 2, 1, 3)
        assert piece.meeting_id == "m[2:5]"
        np.testing.assert_array_equal(
            piece.embeddings.data, meeting.embeddings.data[1:5]
        )
        assert piece.spans == meeting.spans[1:5]

    def test_full_range(self):
        meeting = make_meeting(["A", "B", "A"])
        piece = sub_sequence(meeting, 1, 3)
        assert piece.identities == meeting.identities
        np.testing.assert_array_equal(piece.embeddings.data, meeting.embeddings.data)

    def test_single_segment(self):
        meeting = make_meeting(["E", "A", "C", "A", "E", "E", "C"])
        piece = sub_sequence(meeting, 3, 3)
        assert canonicalize(piece.identities) == (1,)

    @pytest.mark.parametrize("start,end", [(0, 3), (3, 2), (2, 8), (8, 8)])
    def test_invalid_range(self, start, end):
        meeting = make_meeting(["E", "A", "C", "A", "E", "E", "C"])
        with pytest.raises(ValueError):
            sub_sequence(meeting, start, end)


class TestRandomizeInputs:
    def corpus(self):
        return [
            make_meeting(["X", "Y", "X", "Y"], seed=1, meeting_id="m1"),
            make_meeting(["P", "Q", "P", "Q"], seed=2, meeting_id="m2"),
        ]

    def test_pattern_and_vector_provenance(self):
        pool = EmbeddingPool.from_corpus(self.corpus())
        out = randomize_inputs((1, 2, 1), pool, "global", np.random.default_rng(0))
        assert out.identities[0] == out.identities[2]
        assert out.identities[0] != out.identities[1]
        for speaker, row in zip(out.identities, out.embeddings.data):
            bank = pool.vectors(speaker)
            assert any(np.array_equal(row, v) for v in bank)

    def test_labels_always_recovered(self):
        pool = EmbeddingPool.from_corpus(self.corpus())
        rng = np.random.default_rng(9)
        for _ in range(50):
            raw = rng.integers(1, 3, size=int(rng.integers(1, 8)))
            labels = canonicalize([str(v) for v in raw])
            out = randomize_inputs(labels, pool, "global", rng)
            assert canonicalize(out.identities) == labels

    def test_meeting_mode_confined(self):
        pool = EmbeddingPool.from_corpus(self.corpus())
        rng = np.random.default_rng(4)
        for _ in range(20):
            out = randomize_inputs((1, 2, 1, 2), pool, "meeting", rng)
            speakers = set(out.identities)
            assert speakers <= {"X", "Y"} or speakers <= {"P", "Q"}

    def test_too_many_clusters(self):
        pool = EmbeddingPool.from_corpus([self.corpus()[0]])
        with pytest.raises(ValueError):
            randomize_inputs((1, 2, 3), pool, "global", np.random.default_rng(0))
        with pytest.raises(ValueError):
            randomize_inputs((1, 2, 3), pool, "meeting", np.random.default_rng(0))

    def test_non_canonical_rejected(self):
        pool = EmbeddingPool.from_corpus(self.corpus())
        with pytest.raises(ValueError):
            randomize_inputs((2, 1), pool, "global", np.random.default_rng(0))

    def test_unknown_mode(self):
        pool = EmbeddingPool.from_corpus(self.corpus())
        with pytest.raises(ValueError):
            randomize_inputs((1,), pool, "local", np.random.default_rng(0))


class TestDiaconisAugment:
    def test_identity_rotation(self):
        meeting = make_meeting(["A", "B"], dim=3)
        out = diaconis_augment(meeting, RotationMatrix(np.eye(3)))
        np.testing.assert_array_equal(out.embeddings.data, meeting.embeddings.data)

    def test_quarter_turn_2d(self):
        spans = ((0.0, 1.0),)
        meeting = MeetingRecord(
            embeddings=EmbeddingSequence(np.array([[1.0, 0.0]])),
            identities=("A",),
            spans=spans,
        )
        quarter = RotationMatrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        out = diaconis_augment(meeting, quarter)
        np.testing.assert_allclose(out.embeddings.data, [[0.0, 1.0]], atol=1e-15)

    def test_gram_matrix_preserved(self):
        meeting = make_meeting(list("ABCABD"), dim=16, seed=8)
        rot = sample_rotation(16, np.random.default_rng(2))
        out = diaconis_augment(meeting, rot)
        before = meeting.embeddings.data @ meeting.embeddings.data.T
        after = out.embeddings.data @ out.embeddings.data.T
        assert np.max(np.abs(before - after)) < 1e-6
        assert out.identities == meeting.identities

    def test_dim_mismatch(self):
        meeting = make_meeting(["A"], dim=4)
        with pytest.raises(ValueError):
            diaconis_augment(meeting, RotationMatrix(np.eye(3)))


class TestScaleVariance:
    def test_factor_one_is_identity(self):
        meeting = make_meeting(["A", "B"])
        assert scale_variance(meeting, 1.0) is meeting

    def test_unit_sphere_reaches_unit_variance(self):
        # Scaling uniform unit vectors by sqrt(dim) gives coordinates of
        # roughly unit variance, which is the model input convention.
        dim, n = 8, 10_000
        rng = np.random.default_rng(3)
        data = rng.standard_normal((n, dim))
        data /= np.linalg.norm(data, axis=1, keepdims=True)
        spans = tuple((float(i), float(i + 1)) for i in range(n))
        meeting = MeetingRecord(
            embeddings=EmbeddingSequence(data),
            identities=("A",) * n,
            spans=spans,
        )
        out = scale_variance(meeting, math.sqrt(dim))
        assert out.embeddings.scaled
        variances = out.embeddings.data.var(axis=0)
        np.testing.assert_allclose(variances, 1.0, atol=0.05)


class TestBuildTrainingSet:
    def test_counts_lengths_and_scaling(self):
        corpus = gen_corpus(n_meetings=3, dim=8, seed=5, segments_range=(12, 20))
        config = AugmentConfig(
            examples_per_meeting=2, max_len=10, min_len_fraction=0.5, seed=1
        )
        examples = list(build_training_set(corpus, config))
        assert len(examples) == 6
        for embeddings, labels in examples:
            assert 5 <= embeddings.n <= 10
            assert embeddings.n == len(labels)
            assert canonicalize([str(l) for l in labels]) == labels
            norms = np.linalg.norm(embeddings.data, axis=1)
            np.testing.assert_allclose(norms, math.sqrt(8), atol=1e-9)

    def test_fixed_fraction_pins_length(self):
        corpus = gen_corpus(n_meetings=2, dim=8, seed=6, segments_range=(15, 20))
        config = AugmentConfig(examples_per_meeting=3, max_len=10, seed=2)
        for embeddings, _ in build_training_set(corpus, config):
            assert embeddings.n == 10

    def test_deterministic(self):
        corpus = gen_corpus(n_meetings=2, dim=8, seed=7, segments_range=(12, 16))
        config = AugmentConfig(
            examples_per_meeting=4, max_len=8, mode="meeting", rotate=True, seed=3
        )
        first = list(build_training_set(corpus, config))
        second = list(build_training_set(corpus, config))
        for (xa, la), (xb, lb) in zip(first, second):
            np.testing.assert_array_equal(xa.data, xb.data)
            assert la == lb

    def test_randomised_rotated_examples_stay_canonical(self):
        corpus = gen_corpus(n_meetings=3, dim=8, seed=8, segments_range=(12, 16))
        config = AugmentConfig(
            examples_per_meeting=5, max_len=8, mode="global", rotate=True, seed=4
        )
        for embeddings, labels in build_training_set(corpus, config):
            assert canonicalize([str(l) for l in labels]) == labels
            norms = np.linalg.norm(embeddings.data, axis=1)
            np.testing.assert_allclose(norms, math.sqrt(8), atol=1e-6)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            list(build_training_set([], AugmentConfig()))


class TestSplitForEval:
    def test_balanced_chunks(self):
        meeting = make_meeting(list("ABCABDABCA"), seed=11)
        chunks = split_for_eval(meeting, 4)
        assert [c.n for c in chunks] == [3, 4, 3]
        glued = tuple(s for c in chunks for s in c.identities)
        assert glued == meeting.identities

    def test_short_meeting_untouched(self):
        meeting = make_meeting(["A", "B", "A"])
        assert split_for_eval(meeting, 50) == [meeting]
        assert split_for_eval(meeting, None) == [meeting]
