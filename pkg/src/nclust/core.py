"""Domain types, unit-sphere geometry helpers and the canonical label encoding.

Cluster labels are made unique by numbering clusters in order of first
appearance: the first segment always gets label 1, and every previously
unseen identity gets ``max(labels so far) + 1``.  Two labellings of the
same sequence then agree iff they describe the same partition, which is
what makes cross-entropy training on label sequences well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

UNIT_NORM_TOL = 1e-6          # tolerance on stored embeddings
NORMALIZE_TOL = 1e-9          # tolerance after an explicit normalisation

CanonicalLabelSequence = tuple[int, ...]
IdentitySequence = tuple[str, ...]


class DegenerateInput(ValueError):
    """A geometric operation received an input with no defined result."""


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, preserving direction.

    Raises:
        DegenerateInput: if ``v`` is (numerically) the zero vector.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInput("cannot normalize a zero or non-finite vector")
    return v / norm


def average_embedding(windows: np.ndarray) -> np.ndarray:
    """Average unit-norm window embeddings and renormalise the result.

    Args:
        windows: M x D matrix, one unit vector per row.

    Raises:
        DegenerateInput: if the rows cancel and the mean is zero.
        ValueError: if a row is not unit norm.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[0] < 1:
        raise ValueError("windows must be a non-empty M x D matrix")
    norms = np.linalg.norm(windows, axis=1)
    if not np.allclose(norms, 1.0, atol=UNIT_NORM_TOL):
        raise ValueError("window embeddings must be unit norm")
    return l2_normalize(windows.mean(axis=0))


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    """An N x D sequence of segment embeddings.

    Rows are unit vectors unless ``scaled`` is set (variance scaling
    multiplies every row by a common factor and is the only sanctioned
    departure from unit norm).
    """

    data: np.ndarray
    scaled: bool = False

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {data.shape}")
        n, dim = data.shape
        if n < 1:
            raise ValueError("embedding sequence must contain at least one row")
        if dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding matrix contains non-finite values")
        if not self.scaled:
            norms = np.linalg.norm(data, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
            if bad.size:
                raise ValueError(
                    f"row {bad[0]} has norm {norms[bad[0]]:.6f}, expected 1"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class MeetingRecord:
    """Embeddings, true identities and time spans for one meeting.

    Spans are (start, end) in seconds, non-overlapping (the loader is
    responsible for removing enclosed segments before constructing a
    record).
    """

    embeddings: EmbeddingSequence
    identities: IdentitySequence
    spans: tuple[tuple[float, float], ...]
    meeting_id: str = field(default="meeting")

    def __post_init__(self) -> None:
        object.__setattr__(self, "identities", tuple(str(z) for z in self.identities))
        object.__setattr__(
            self, "spans", tuple((float(s), float(e)) for s, e in self.spans)
        )
        n = self.embeddings.n
        if len(self.identities) != n:
            raise ValueError(
                f"{len(self.identities)} identities for {n} embeddings"
            )
        if len(self.spans) != n:
            raise ValueError(f"{len(self.spans)} spans for {n} embeddings")
        for start, end in self.spans:
            if not start < end:
                raise ValueError(f"span ({start}, {end}) must have start < end")
        ordered = sorted(self.spans)
        for (_, prev_end), (next_start, _) in zip(ordered, ordered[1:]):
            if next_start < prev_end - 1e-9:
                raise ValueError("spans overlap; enclosed segments must be removed")

    @property
    def n(self) -> int:
        return self.embeddings.n

    @property
    def speakers(self) -> tuple[str, ...]:
        """Distinct identities in order of first appearance."""
        seen: dict[str, None] = {}
        for z in self.identities:
            seen.setdefault(z, None)
        return tuple(seen)

    def labels(self) -> CanonicalLabelSequence:
        """Canonical cluster labels of this meeting's identities."""
        return canonicalize(self.identities)


def canonicalize(ids: Sequence[str]) -> CanonicalLabelSequence:
    """Map an identity sequence to first-appearance cluster labels.

    The first segment gets label 1; each segment of a previously seen
    identity reuses that identity's label; each new identity gets the
    next unused label.
    """
    if len(ids) == 0:
        raise ValueError("identity sequence must be non-empty")
    assignment: dict[str, int] = {}
    labels = []
    for z in ids:
        if z not in assignment:
            assignment[z] = len(assignment) + 1
        labels.append(assignment[z])
    return tuple(labels)


def is_canonical(labels: Sequence[int]) -> bool:
    """True iff ``labels`` is a valid first-appearance label sequence."""
    if len(labels) == 0:
        return False
    highest = 0
    for lab in labels:
        if lab != int(lab) or lab < 1:
            return False
        if lab > highest + 1:
            return False
        highest = max(highest, int(lab))
    return True


def relabel_equivalent(a: Sequence[int], b: Sequence[int]) -> bool:
    """True iff ``a`` and ``b`` describe the same partition.

    Checks that some bijection between label sets maps one sequence onto
    the other, i.e. positions are grouped identically.
    """
    if len(a) != len(b):
        raise ValueError(f"label sequences differ in length: {len(a)} vs {len(b)}")
    forward: dict[int, int] = {}
    backward: dict[int, int] = {}
    for x, y in zip(a, b):
        if forward.setdefault(x, y) != y:
            return False
        if backward.setdefault(y, x) != x:
            return False
    return True
