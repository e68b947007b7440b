"""Diarisation scoring: optimal speaker mapping and SER/DER.

Hypotheses are cluster labels on the reference segmentation (oracle
segmentation), so missed speech and false alarms are structurally zero
and DER reduces to the speaker error rate.  Scoring excludes regions
where two or more reference speakers are active, and a collar around
every reference speaker-change point (a boundary where the active
speaker set switches from one non-empty set to a different one).  All
interval arithmetic runs on an integer millisecond grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from nclust.core import MeetingRecord

Interval = tuple[int, int]          # [start_ms, end_ms)


def _ms(seconds: float) -> int:
    return int(round(seconds * 1000.0))


def _merge(intervals: list[Interval]) -> list[Interval]:
    """Union of intervals as a sorted, disjoint list."""
    merged: list[Interval] = []
    for start, end in sorted(intervals):
        if end <= start:
            continue
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def _intersect(a: list[Interval], b: list[Interval]) -> list[Interval]:
    out: list[Interval] = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo < hi:
            out.append((lo, hi))
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return out


def _subtract(a: list[Interval], b: list[Interval]) -> list[Interval]:
    out: list[Interval] = []
    b = _merge(b)
    for start, end in a:
        cursor = start
        for bs, be in b:
            if be <= cursor or bs >= end:
                continue
            if bs > cursor:
                out.append((cursor, bs))
            cursor = max(cursor, be)
            if cursor >= end:
                break
        if cursor < end:
            out.append((cursor, end))
    return out


def _total(intervals: list[Interval]) -> int:
    return sum(end - start for start, end in intervals)


def _timeline(ref: MeetingRecord) -> list[tuple[int, int, frozenset[str]]]:
    """Atomic intervals of the reference with their active speaker sets."""
    events: list[tuple[int, int, str]] = []
    for (start, end), speaker in zip(ref.spans, ref.identities):
        events.append((_ms(start), 1, speaker))
        events.append((_ms(end), -1, speaker))
    points = sorted({t for t, _, _ in events})
    atoms = []
    active: dict[str, int] = {}
    by_point: dict[int, list[tuple[int, str]]] = {}
    for t, delta, speaker in events:
        by_point.setdefault(t, []).append((delta, speaker))
    for a, b in zip(points, points[1:]):
        for delta, speaker in by_point[a]:
            count = active.get(speaker, 0) + delta
            if count:
                active[speaker] = count
            else:
                active.pop(speaker, None)
        atoms.append((a, b, frozenset(active)))
    return atoms


def _scored_regions(ref: MeetingRecord, collar_ms: int) -> list[Interval]:
    """Speech minus overlap minus collars around speaker-change points."""
    atoms = _timeline(ref)
    speech = _merge([(a, b) for a, b, who in atoms if len(who) >= 1])
    overlap = _merge([(a, b) for a, b, who in atoms if len(who) >= 2])
    collars: list[Interval] = []
    if collar_ms > 0:
        for (_, t, before), (t2, _, after) in zip(atoms, atoms[1:]):
            if t == t2 and before and after and before != after:
                collars.append((t - collar_ms, t + collar_ms))
    return _subtract(_subtract(speech, overlap), collars)


def _overlap_matrix(
    ref: MeetingRecord,
    hyp: Sequence[int],
    scored: list[Interval],
) -> tuple[list[int], list[str], np.ndarray]:
    """Scored seconds jointly attributed to (hypothesis label, speaker)."""
    labels = sorted(set(int(l) for l in hyp))
    speakers = sorted(set(ref.identities))
    matrix = np.zeros((len(labels), len(speakers)))
    li = {l: i for i, l in enumerate(labels)}
    si = {s: i for i, s in enumerate(speakers)}
    for (start, end), speaker, label in zip(ref.spans, ref.identities, hyp):
        seg = _intersect([(_ms(start), _ms(end))], scored)
        matrix[li[int(label)], si[speaker]] += _total(seg) / 1000.0
    return labels, speakers, matrix


@dataclass(frozen=True)
class ScoreReport:
    """SER/DER decomposition over the scored portion of a meeting set."""

    scored_time_s: float
    missed_s: float
    false_alarm_s: float
    speaker_error_s: float
    mapping: dict[int, str] = field(default_factory=dict)

    @property
    def ser_percent(self) -> float:
        return 100.0 * self.speaker_error_s / self.scored_time_s

    @property
    def der_percent(self) -> float:
        return (
            100.0
            * (self.missed_s + self.false_alarm_s + self.speaker_error_s)
            / self.scored_time_s
        )

    def as_dict(self) -> dict:
        return {
            "scored_time_s": self.scored_time_s,
            "missed_s": self.missed_s,
            "false_alarm_s": self.false_alarm_s,
            "speaker_error_s": self.speaker_error_s,
            "ser_percent": self.ser_percent,
            "der_percent": self.der_percent,
            "mapping": {str(k): v for k, v in sorted(self.mapping.items())},
        }


def optimal_mapping(
    ref: MeetingRecord, hyp: Sequence[int], collar_s: float = 0.0
) -> dict[int, str]:
    """One-to-one map hypothesis label -> speaker maximising matched time.

    Solved as a linear assignment over the label-by-speaker matrix of
    jointly attributed scored time; labels beyond the number of speakers
    stay unmapped.
    """
    if len(hyp) != ref.n:
        raise ValueError(f"hypothesis length {len(hyp)} != {ref.n} segments")
    scored = _scored_regions(ref, _ms(collar_s))
    labels, speakers, matrix = _overlap_matrix(ref, hyp, scored)
    rows, cols = linear_sum_assignment(-matrix)
    return {labels[r]: speakers[c] for r, c in zip(rows, cols)}


def ser(ref: MeetingRecord, hyp: Sequence[int], collar_s: float = 0.25) -> ScoreReport:
    """Score one meeting's hypothesis labels against its reference.

    Raises:
        ValueError: if the hypothesis length mismatches or the collar
            leaves no scored time.
    """
    if len(hyp) != ref.n:
        raise ValueError(f"hypothesis length {len(hyp)} != {ref.n} segments")
    scored = _scored_regions(ref, _ms(collar_s))
    scored_ms = _total(scored)
    if scored_ms == 0:
        raise ValueError("no scored time remains after collar/overlap exclusion")

    labels, speakers, matrix = _overlap_matrix(ref, hyp, scored)
    rows, cols = linear_sum_assignment(-matrix)
    mapping = {labels[r]: speakers[c] for r, c in zip(rows, cols)}
    matched_s = float(matrix[rows, cols].sum())

    scored_s = scored_ms / 1000.0
    return ScoreReport(
        scored_time_s=scored_s,
        missed_s=0.0,
        false_alarm_s=0.0,
        speaker_error_s=scored_s - matched_s,
        mapping=mapping,
    )


def batch_score(
    corpus: Sequence[MeetingRecord],
    hyps: Mapping[str, Sequence[int]],
    collar_s: float = 0.25,
) -> ScoreReport:
    """Duration-weighted aggregate over a corpus.

    The mapping is computed per meeting; totals are summed so the
    aggregate SER equals total error seconds over total scored seconds.

    Raises:
        KeyError: if a meeting has no hypothesis.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must be non-empty")
    scored = missed = false_alarm = error = 0.0
    for meeting in corpus:
        if meeting.meeting_id not in hyps:
            raise KeyError(f"no hypothesis for meeting {meeting.meeting_id!r}")
        report = ser(meeting, hyps[meeting.meeting_id], collar_s)
        scored += report.scored_time_s
        missed += report.missed_s
        false_alarm += report.false_alarm_s
        error += report.speaker_error_s
    return ScoreReport(
        scored_time_s=scored,
        missed_s=missed,
        false_alarm_s=false_alarm,
        speaker_error_s=error,
    )
