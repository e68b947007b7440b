"""Data augmentation for label-sequence training examples.

Three schemes, combinable in a fixed order:

1. sub-sequence randomisation: train on random slices of a meeting, so
   the same segment can carry different canonical labels in different
   slices;
2. input-vector randomisation: keep a label sequence but redraw its
   speakers and their embeddings from a pool, either globally or within
   a single sampled meeting;
3. rotation of the entire sequence by a Haar-random special-orthogonal
   matrix, which moves the whole problem to a fresh region of the
   hypersphere without changing any pairwise geometry.

Variance scaling (multiplying unit embeddings by sqrt(dim) so per-axis
variance is about 1) is applied last as a model-input convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from nclust.core import (
    CanonicalLabelSequence,
    EmbeddingSequence,
    MeetingRecord,
    canonicalize,
)


@dataclass(frozen=True, eq=False)
class RotationMatrix:
    """A D x D special-orthogonal matrix (checked on construction)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError("rotation matrix must be square")
        dim = data.shape[0]
        if np.max(np.abs(data.T @ data - np.eye(dim))) > 1e-8:
            raise ValueError("matrix is not orthogonal")
        if abs(np.linalg.det(data) - 1.0) > 1e-6:
            raise ValueError("matrix has determinant != +1")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def sample_rotation(dim: int, rng: np.random.Generator) -> RotationMatrix:
    """Sample a rotation uniformly (Haar) from SO(dim).

    QR-decomposes a matrix of iid standard normals and fixes the sign
    ambiguity by making the R factor's diagonal positive, which yields
    Haar measure on the orthogonal group; a final column flip lands the
    sample in the determinant +1 component.
    """
    if dim < 2:
        raise ValueError("rotation dimension must be at least 2")
    z = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return RotationMatrix(q)


class EmbeddingPool:
    """Segment embeddings indexed by speaker, with meeting grouping.

    Built from a corpus: every segment embedding is filed under its
    speaker, and per meeting so that meeting-level sampling can restrict
    both the candidate speakers and their vectors to one meeting.
    """

    def __init__(self) -> None:
        self._global: dict[str, list[np.ndarray]] = {}
        self._by_meeting: dict[str, dict[str, list[np.ndarray]]] = {}

    @classmethod
    def from_corpus(cls, meetings: Sequence[MeetingRecord]) -> "EmbeddingPool":
        pool = cls()
        for meeting in meetings:
            per_meeting = pool._by_meeting.setdefault(meeting.meeting_id, {})
            for speaker, row in zip(meeting.identities, meeting.embeddings.data):
                pool._global.setdefault(speaker, []).append(row)
                per_meeting.setdefault(speaker, []).append(row)
        if not pool._global:
            raise ValueError("cannot build a pool from an empty corpus")
        return pool

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(sorted(self._global))

    @property
    def meetings(self) -> tuple[str, ...]:
        return tuple(sorted(self._by_meeting))

    def speakers_in(self, meeting_id: str) -> tuple[str, ...]:
        return tuple(sorted(self._by_meeting[meeting_id]))

    def vectors(self, speaker: str, meeting_id: str | None = None) -> list[np.ndarray]:
        if meeting_id is None:
            return self._global[speaker]
        return self._by_meeting[meeting_id][speaker]


def sub_sequence(meeting: MeetingRecord, start: int, end: int) -> MeetingRecord:
    """Slice segments ``start..end`` (1-based, inclusive) of a meeting.

    Identities and spans are carried over; canonical labels of the slice
    are recomputed by the caller (``canonicalize``), which is what lets
    one segment carry different labels in different slices.
    """
    if not (1 <= start <= end <= meeting.n):
        raise ValueError(
            f"invalid sub-sequence range [{start}, {end}] for length {meeting.n}"
        )
    sl = slice(start - 1, end)
    return MeetingRecord(
        embeddings=EmbeddingSequence(
            meeting.embeddings.data[sl], scaled=meeting.embeddings.scaled
        ),
        identities=meeting.identities[sl],
        spans=meeting.spans[sl],
        meeting_id=f"{meeting.meeting_id}[{start}:{end}]",
    )


def randomize_inputs(
    labels: CanonicalLabelSequence,
    pool: EmbeddingPool,
    mode: str,
    rng: np.random.Generator,
) -> MeetingRecord:
    """Realise a label sequence with freshly sampled speakers and vectors.

    ``global`` mode draws the speakers uniformly from the whole pool and
    each vector from all of that speaker's segments; ``meeting`` mode
    first samples one meeting and confines both choices to it.  The
    output identities canonicalise back to ``labels`` exactly.
    """
    if mode not in ("global", "meeting"):
        raise ValueError(f"unknown randomisation mode: {mode!r}")
    k = max(labels)
    if canonicalize([str(l) for l in labels]) != tuple(labels):
        raise ValueError("labels must be canonical")

    meeting_id: str | None = None
    if mode == "global":
        candidates = pool.speakers
        if len(candidates) < k:
            raise ValueError(f"pool has {len(candidates)} speakers, need {k}")
    else:
        eligible = [m for m in pool.meetings if len(pool.speakers_in(m)) >= k]
        if not eligible:
            raise ValueError(f"no meeting in the pool has {k} speakers")
        meeting_id = eligible[int(rng.integers(len(eligible)))]
        candidates = pool.speakers_in(meeting_id)

    chosen = rng.choice(len(candidates), size=k, replace=False)
    cluster_speaker = {c + 1: candidates[i] for c, i in enumerate(chosen)}

    identities = tuple(cluster_speaker[lab] for lab in labels)
    rows = []
    for speaker in identities:
        vecs = pool.vectors(speaker, meeting_id)
        rows.append(vecs[int(rng.integers(len(vecs)))])

    # Spans are synthetic placeholders: randomisation serves training,
    # which never looks at time.
    spans = tuple((float(i), float(i + 1)) for i in range(len(labels)))
    return MeetingRecord(
        embeddings=EmbeddingSequence(np.stack(rows)),
        identities=identities,
        spans=spans,
        meeting_id=f"randomized:{mode}",
    )


def diaconis_augment(meeting: MeetingRecord, rotation: RotationMatrix) -> MeetingRecord:
    """Rotate every embedding of the meeting by the same rotation.

    Inner products and norms are preserved, so the rotated meeting is a
    geometrically faithful copy living elsewhere on the sphere.
    """
    if rotation.dim != meeting.embeddings.dim:
        raise ValueError(
            f"rotation dim {rotation.dim} != embedding dim {meeting.embeddings.dim}"
        )
    rotated = meeting.embeddings.data @ rotation.data
    return replace(
        meeting,
        embeddings=EmbeddingSequence(rotated, scaled=meeting.embeddings.scaled),
    )


def scale_variance(meeting: MeetingRecord, factor: float) -> MeetingRecord:
    """Multiply all embeddings by ``factor``.

    With ``factor = sqrt(dim)`` the per-axis variance of uniformly
    spread unit embeddings becomes about 1, the usual input convention
    for the clustering model.
    """
    if factor == 1.0:
        return meeting
    return replace(
        meeting,
        embeddings=EmbeddingSequence(
            meeting.embeddings.data * float(factor), scaled=True
        ),
    )


@dataclass(frozen=True)
class AugmentConfig:
    """How to materialise training examples from a corpus.

    ``max_len is None`` means slices span 50%..100% of each full
    meeting; otherwise lengths are drawn between
    ``min_len_fraction * max_len`` and ``max_len`` (capped by the
    meeting).  ``mode`` selects input-vector randomisation
    (none/global/meeting) and ``rotate`` the per-example rotation.
    """

    examples_per_meeting: int = 100
    max_len: int | None = 50
    min_len_fraction: float = 1.0
    mode: str = "none"
    rotate: bool = False
    scale_by_sqrt_dim: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.examples_per_meeting < 1:
            raise ValueError("examples_per_meeting must be positive")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be positive")
        if not 0.0 < self.min_len_fraction <= 1.0:
            raise ValueError("min_len_fraction must lie in (0, 1]")
        if self.mode not in ("none", "global", "meeting"):
            raise ValueError(f"unknown randomisation mode: {self.mode!r}")


def sample_sub_meeting(
    meeting: MeetingRecord,
    rng: np.random.Generator,
    max_len: int | None,
    min_len_fraction: float,
) -> MeetingRecord:
    """One random slice of ``meeting`` honouring the length policy."""
    n = meeting.n
    cap = n if max_len is None else min(max_len, n)
    lo = max(1, math.ceil(min_len_fraction * cap))
    length = int(rng.integers(lo, cap + 1))
    start = int(rng.integers(1, n - length + 2))
    return sub_sequence(meeting, start, start + length - 1)


def build_training_set(
    corpus: Sequence[MeetingRecord],
    config: AugmentConfig,
    pool: EmbeddingPool | None = None,
) -> Iterator[tuple[EmbeddingSequence, CanonicalLabelSequence]]:
    """Yield augmented (embeddings, canonical labels) training pairs.

    Per original meeting, ``examples_per_meeting`` examples are built by
    applying, in order: sub-sequence slicing, input-vector randomisation,
    rotation, variance scaling.  Every example owns an RNG stream derived
    from the config seed and its (meeting, example) index, so the stream
    is reproducible and independent of generation order.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must be non-empty")
    if config.mode != "none" and pool is None:
        pool = EmbeddingPool.from_corpus(corpus)

    for m_idx, meeting in enumerate(corpus):
        for e_idx in range(config.examples_per_meeting):
            rng = np.random.default_rng(
                np.random.SeedSequence(config.seed, spawn_key=(m_idx, e_idx))
            )
            sub = sample_sub_meeting(
                meeting, rng, config.max_len, config.min_len_fraction
            )
            labels = canonicalize(sub.identities)
            if config.mode != "none":
                sub = randomize_inputs(labels, pool, config.mode, rng)
            if config.rotate:
                rotation = sample_rotation(sub.embeddings.dim, rng)
                sub = diaconis_augment(sub, rotation)
            if config.scale_by_sqrt_dim:
                sub = scale_variance(sub, math.sqrt(sub.embeddings.dim))
            yield sub.embeddings, labels


def split_for_eval(meeting: MeetingRecord, max_len: int | None) -> list[MeetingRecord]:
    """Split a meeting into as few consecutive chunks as possible, each
    no longer than ``max_len`` (balanced sizes, deterministic)."""
    if max_len is None or meeting.n <= max_len:
        return [meeting]
    n_chunks = math.ceil(meeting.n / max_len)
    bounds = np.linspace(0, meeting.n, n_chunks + 1).round().astype(int)
    return [
        sub_sequence(meeting, int(a) + 1, int(b))
        for a, b in zip(bounds[:-1], bounds[1:])
    ]
