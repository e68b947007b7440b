"""Supervised neural clustering of speaker-embedding sequences.

Clustering an embedding sequence is treated as sequence-to-sequence
classification: a Transformer reads the whole sequence and emits one
cluster label per segment, with labels numbered by order of first
appearance.  The package also ships the data augmentation schemes that
make such training viable on small corpora, a synthetic meeting
generator, a refined spectral-clustering baseline, and a diarisation
scorer (speaker error rate with collar and overlap exclusion).
"""

from nclust.core import (
    CanonicalLabelSequence,
    DegenerateInput,
    EmbeddingSequence,
    MeetingRecord,
    canonicalize,
    is_canonical,
    l2_normalize,
    relabel_equivalent,
)

__all__ = [
    "CanonicalLabelSequence",
    "DegenerateInput",
    "EmbeddingSequence",
    "MeetingRecord",
    "canonicalize",
    "is_canonical",
    "l2_normalize",
    "relabel_equivalent",
]

__version__ = "0.1.0"
