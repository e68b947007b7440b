"""Synthetic meeting corpora: hypersphere speaker clusters plus turn-taking.

Each speaker is a direction on the unit sphere with a concentration that
controls how tightly that speaker's segment embeddings cluster around it
(lower concentration means more overlap between speakers and a harder
clustering problem).  Meetings are first-order stay/switch chains over a
small speaker set, with consecutive time spans.  Corpora are persisted as
one self-describing JSON object per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from nclust.core import (
    UNIT_NORM_TOL,
    EmbeddingSequence,
    MeetingRecord,
    l2_normalize,
)

CORPUS_FORMAT_VERSION = 1


class CorpusFormatError(ValueError):
    """A corpus file line could not be parsed or validated."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


@dataclass(frozen=True)
class SpeakerModel:
    """A speaker's embedding distribution on the unit sphere."""

    mean_direction: np.ndarray
    concentration: float
    name: str = "spk"

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean_direction, dtype=np.float64)
        object.__setattr__(self, "mean_direction", mean)
        if abs(float(np.linalg.norm(mean)) - 1.0) > 1e-9:
            raise ValueError("mean_direction must be unit norm")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")


@dataclass(frozen=True)
class TurnModel:
    """First-order turn-taking: keep the floor with ``stay_probability``."""

    stay_probability: float = 0.5
    speakers_per_meeting: tuple[int, int] = (2, 4)
    segment_duration: tuple[float, float] = (1.0, 8.0)

    def __post_init__(self) -> None:
        if not 0.0 < self.stay_probability < 1.0 + 1e-12:
            raise ValueError("stay_probability must lie in (0, 1]")
        lo, hi = self.speakers_per_meeting
        if not (2 <= lo <= hi):
            raise ValueError("speakers_per_meeting must satisfy 2 <= min <= max")
        dlo, dhi = self.segment_duration
        if not (0 < dlo <= dhi):
            raise ValueError("segment_duration must satisfy 0 < min <= max")


def gen_speaker(
    dim: int,
    rng: np.random.Generator,
    concentration: float = 10.0,
    name: str = "spk",
) -> SpeakerModel:
    """Draw a speaker whose mean direction is uniform on the sphere."""
    if dim < 2:
        raise ValueError("embedding dimension must be at least 2")
    return SpeakerModel(
        mean_direction=l2_normalize(rng.standard_normal(dim)),
        concentration=float(concentration),
        name=name,
    )


def _identity_chain(
    n_segments: int,
    n_speakers: int,
    stay_probability: float,
    rng: np.random.Generator,
    min_appearances: int,
) -> list[int]:
    """Stay/switch chain over speaker indices, resampled until every
    speaker appears at least ``min_appearances`` times (then patched as a
    last resort)."""

    def chain() -> list[int]:
        seq = [int(rng.integers(n_speakers))]
        for _ in range(n_segments - 1):
            if rng.random() < stay_probability or n_speakers == 1:
                seq.append(seq[-1])
            else:
                others = [s for s in range(n_speakers) if s != seq[-1]]
                seq.append(others[int(rng.integers(len(others)))])
        return seq

    for _ in range(1000):
        seq = chain()
        counts = np.bincount(seq, minlength=n_speakers)
        if counts.min() >= min_appearances:
            return seq
    # Patch missing speakers into random positions; keeps the guarantee
    # even for adversarial stay probabilities.
    for spk in range(n_speakers):
        deficit = min_appearances - int(np.sum(np.asarray(seq) == spk))
        for _ in range(max(0, deficit)):
            seq[int(rng.integers(n_segments))] = spk
    return seq


def sample_embedding(speaker: SpeakerModel, rng: np.random.Generator) -> np.ndarray:
    """One unit embedding: tangent Gaussian noise around the speaker mean.

    Noise is isotropic in the tangent space of ``mean_direction`` with
    per-axis scale ``1/sqrt(concentration)``; the sum is renormalised
    onto the sphere.  As concentration grows the embedding collapses to
    the mean direction.
    """
    mean = speaker.mean_direction
    noise = rng.standard_normal(mean.shape[0])
    noise -= np.dot(noise, mean) * mean
    return l2_normalize(mean + noise / np.sqrt(speaker.concentration))


def gen_meeting(
    speakers: Sequence[SpeakerModel],
    n_segments: int,
    turn: TurnModel,
    rng: np.random.Generator,
    meeting_id: str = "meeting",
    force_appearance: bool = True,
) -> MeetingRecord:
    """Generate one meeting from the given speakers.

    Every listed speaker appears at least once (three times when the
    meeting is long enough, so downstream sampling pools are never
    starved) unless ``force_appearance`` is off.
    """
    k = len(speakers)
    lo, hi = turn.speakers_per_meeting
    if not (2 <= k <= hi) and force_appearance:
        raise ValueError(f"need between 2 and {hi} speakers, got {k}")
    if k < 1:
        raise ValueError("at least one speaker required")
    if n_segments < k and force_appearance:
        raise ValueError(f"{n_segments} segments cannot cover {k} speakers")

    min_appearances = min(3, n_segments // k) if force_appearance else 0
    min_appearances = max(min_appearances, 1) if force_appearance else 0
    chain = _identity_chain(
        n_segments, k, turn.stay_probability, rng, min_appearances
    )

    rows = np.stack([sample_embedding(speakers[s], rng) for s in chain])
    dlo, dhi = turn.segment_duration
    durations = np.round(rng.uniform(dlo, dhi, size=n_segments), 3)
    starts = np.concatenate([[0.0], np.cumsum(durations)[:-1]])
    spans = tuple(
        (round(float(s), 3), round(float(s + d), 3))
        for s, d in zip(starts, durations)
    )
    return MeetingRecord(
        embeddings=EmbeddingSequence(rows),
        identities=tuple(speakers[s].name for s in chain),
        spans=spans,
        meeting_id=meeting_id,
    )


def gen_corpus(
    n_meetings: int,
    dim: int,
    seed: int,
    n_speakers: int | None = None,
    concentration: float = 10.0,
    turn: TurnModel | None = None,
    segments_range: tuple[int, int] = (50, 300),
    id_prefix: str = "mtg",
) -> list[MeetingRecord]:
    """Generate a corpus over a shared speaker roster.

    Each meeting draws its speaker set from the roster, so speakers can
    recur across meetings (as they do in real meeting collections).  Per
    meeting RNG streams are derived from ``seed`` so generation is
    reproducible and order-independent.
    """
    if n_meetings < 1:
        raise ValueError("need at least one meeting")
    turn = turn or TurnModel()
    if n_speakers is None:
        # Roughly one distinct speaker per meeting, never fewer than a
        # single meeting can need.
        n_speakers = max(turn.speakers_per_meeting[1], round(1.05 * n_meetings))
    if n_speakers < turn.speakers_per_meeting[0]:
        raise ValueError("roster smaller than the per-meeting minimum")

    roster_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    roster = [
        gen_speaker(dim, roster_rng, concentration, name=f"{id_prefix}_spk{i:03d}")
        for i in range(n_speakers)
    ]

    lo, hi = segments_range
    meetings = []
    for m in range(n_meetings):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, m)))
        k = int(rng.integers(turn.speakers_per_meeting[0], turn.speakers_per_meeting[1] + 1))
        chosen = rng.choice(n_speakers, size=k, replace=False)
        n_segments = int(rng.integers(lo, hi + 1))
        meetings.append(
            gen_meeting(
                [roster[i] for i in chosen],
                n_segments,
                turn,
                rng,
                meeting_id=f"{id_prefix}{m:04d}",
            )
        )
    return meetings


def _meeting_to_obj(meeting: MeetingRecord) -> dict:
    return {
        "version": CORPUS_FORMAT_VERSION,
        "meeting_id": meeting.meeting_id,
        "dim": meeting.embeddings.dim,
        "segments": [
            {
                "start": start,
                "end": end,
                "speaker": speaker,
                "embedding": [float(x) for x in row],
            }
            for (start, end), speaker, row in zip(
                meeting.spans, meeting.identities, meeting.embeddings.data
            )
        ],
    }


def _meeting_from_obj(obj: dict, line_number: int) -> MeetingRecord:
    try:
        meeting_id = obj["meeting_id"]
        dim = int(obj["dim"])
        segments = obj["segments"]
        spans = tuple((float(s["start"]), float(s["end"])) for s in segments)
        identities = tuple(str(s["speaker"]) for s in segments)
        rows = np.array([s["embedding"] for s in segments], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"malformed meeting object: {exc}", line_number)
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise CorpusFormatError(
            f"embedding width does not match dim={dim}", line_number
        )
    norms = np.linalg.norm(rows, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise CorpusFormatError(
            f"segment {bad[0]} embedding norm {norms[bad[0]]:.6f} is not unit",
            line_number,
        )
    try:
        return MeetingRecord(
            embeddings=EmbeddingSequence(rows),
            identities=identities,
            spans=spans,
            meeting_id=meeting_id,
        )
    except ValueError as exc:
        raise CorpusFormatError(str(exc), line_number)


def write_corpus(meetings: Iterable[MeetingRecord], path) -> None:
    """Write meetings as one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for meeting in meetings:
            fh.write(json.dumps(_meeting_to_obj(meeting), sort_keys=True))
            fh.write("\n")


def read_corpus(path) -> list[MeetingRecord]:
    """Read a corpus written by :func:`write_corpus`.

    Raises:
        CorpusFormatError: on unparseable lines or norm violations, with
            the offending line number.
    """
    meetings = []
    with open(path, "r", encoding="utf-8") as fh:
        meetings = _read_corpus_lines(fh)
    return meetings


def _read_corpus_lines(fh: TextIO) -> list[MeetingRecord]:
    meetings = []
    for i, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid JSON: {exc}", i)
        meetings.append(_meeting_from_obj(obj, i))
    return meetings
