"""Clip features: activity word sets and per-clip coverage vectors.

Each typical activity is summarised by the smallest set of its most probable
words whose accumulated probability stays within ``word_cutoff``.  A clip is
then described by, for each activity, the share of its tokens whose word type
falls inside that activity's word set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from hdpgp.codebook import ClipDocument, Corpus
from hdpgp.errors import DataError
from hdpgp.hdp import ActivityModel
from hdpgp.hdphmm import StateModel

log = logging.getLogger(__name__)

FEATURES_SCHEMA = "features/1"


@dataclass(frozen=True)
class ActivityWordSet:
    activity_id: int
    words: frozenset
    covered_mass: float

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, w) -> bool:
        return int(w) in self.words


def activity_word_set(phi_k, word_cutoff: float = 0.9, activity_id: int = 0) -> ActivityWordSet:
    """Most probable words of one activity, accumulated up to ``word_cutoff``.

    Words are ranked by decreasing probability (equal probabilities by
    ascending index) and kept while the running mass is ``<= word_cutoff``.
    The top word is always kept.
    """
    phi_k = np.asarray(phi_k, dtype=float)
    if phi_k.ndim != 1 or phi_k.size == 0:
        raise DataError("phi_k must be a non-empty 1-D distribution")
    if np.any(phi_k < 0) or abs(phi_k.sum() - 1.0) > 1e-6:
        raise DataError(f"phi_k must be a distribution (sum = {phi_k.sum():.8f})")
    if not 0 < word_cutoff <= 1:
        raise DataError(f"word_cutoff must lie in (0, 1], got {word_cutoff}")
    order = np.argsort(-phi_k, kind="stable")
    acc = np.cumsum(phi_k[order])
    keep = acc <= word_cutoff + 1e-12
    keep[0] = True
    if word_cutoff >= 1.0:
        keep &= phi_k[order] > 0
        keep[0] = True
    n = int(np.count_nonzero(keep))
    return ActivityWordSet(
        activity_id=int(activity_id),
        words=frozenset(int(w) for w in order[:n]),
        covered_mass=float(acc[n - 1]),
    )


def word_sets_for(model: ActivityModel, word_cutoff: float = 0.9) -> list[ActivityWordSet]:
    return [activity_word_set(model.phi[k], word_cutoff, k) for k in model.typical]


@dataclass(frozen=True)
class ClipFeature:
    clip_id: int
    c: np.ndarray
    n_words: int
    unassigned: frozenset  # word types outside every word set
    n_unassigned: int  # tokens outside every word set
    unassigned_tokens: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.c.size


class WordSetIndex:
    """Membership lookup for a list of word sets over a codebook of size V.

    Builds a dense ``(V, K)`` boolean table once so that featurizing a clip is
    a single fancy-index and column sum.
    """

    def __init__(self, word_sets: Sequence[ActivityWordSet], V: int):
        if not word_sets:
            raise DataError("need at least one activity word set")
        self.word_sets = list(word_sets)
        self.V = int(V)
        self.member = np.zeros((self.V, len(word_sets)), dtype=bool)
        for k, ws in enumerate(word_sets):
            idx = np.fromiter(ws.words, dtype=np.int64, count=len(ws.words))
            if idx.size and (idx.min() < 0 or idx.max() >= self.V):
                raise DataError(f"word set {ws.activity_id} holds words outside [0, {self.V})")
            self.member[idx, k] = True
        self.covered = self.member.any(axis=1)

    def feature(self, clip: ClipDocument) -> ClipFeature:
        words = clip.array()
        K = self.member.shape[1]
        if words.size == 0:
            return ClipFeature(clip.clip_id, np.zeros(K), 0, frozenset(), 0, words)
        if words.min() < 0 or words.max() >= self.V:
            raise DataError(f"clip {clip.clip_id}: word index outside [0, {self.V})")
        hits = self.member[words]
        c = hits.sum(axis=0) / words.size
        outside = words[~self.covered[words]]
        return ClipFeature(
            clip_id=clip.clip_id,
            c=c.astype(float),
            n_words=int(words.size),
            unassigned=frozenset(int(w) for w in np.unique(outside)),
            n_unassigned=int(outside.size),
            unassigned_tokens=outside,
        )


def clip_feature(clip: ClipDocument, word_sets: Sequence[ActivityWordSet], V: int | None = None) -> ClipFeature:
    """Coverage vector of one clip.

    Entry ``k`` is the number of the clip's tokens whose word lies in word set
    ``k``, divided by the clip's token count.  A token may count towards
    several sets when they overlap.
    """
    if V is None:
        top = max((max(ws.words) for ws in word_sets if ws.words), default=0)
        words = clip.array()
        V = int(max(top, words.max() if words.size else 0)) + 1
    return WordSetIndex(word_sets, V).feature(clip)


@dataclass(frozen=True)
class TrainingSet:
    features: tuple[ClipFeature, ...]
    labels: np.ndarray
    n_dropped: int = 0

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DataError("features and labels differ in length")

    def X(self) -> np.ndarray:
        K = self.features[0].K if self.features else 0
        return np.array([f.c for f in self.features], dtype=float).reshape(len(self.features), K)


def build_training_set(
    corpus: Corpus,
    activities: ActivityModel,
    states: StateModel,
    word_cutoff: float = 0.9,
) -> TrainingSet:
    """Features over the typical activities, labelled with typical states only."""
    if len(states.state_seq) != len(corpus):
        raise DataError(
            f"state sequence has {len(states.state_seq)} labels, corpus has {len(corpus)} clips"
        )
    index = WordSetIndex(word_sets_for(activities, word_cutoff), corpus.grid.codebook_size)
    typical = set(states.typical)
    feats, labels = [], []
    for clip, s in zip(corpus.clips, states.state_seq):
        if int(s) in typical:
            feats.append(index.feature(clip))
            labels.append(int(s))
    dropped = len(corpus) - len(feats)
    if dropped:
        log.info("dropped %d clips labelled with non-typical states", dropped)
    return TrainingSet(tuple(feats), np.asarray(labels, dtype=np.int64), dropped)


# -- feature files -------------------------------------------------------------


def features_header(word_sets: Sequence[ActivityWordSet], V: int, config_hash: str | None = None) -> dict:
    return {
        "schema": FEATURES_SCHEMA,
        "codebook_size": int(V),
        "activities": [ws.activity_id for ws in word_sets],
        "word_sets": [sorted(ws.words) for ws in word_sets],
        "covered_mass": [ws.covered_mass for ws in word_sets],
        "config_hash": config_hash,
    }


def feature_to_json(f: ClipFeature, label: int | None = None) -> dict:
    doc = {
        "clip_id": f.clip_id,
        "label": None if label is None else int(label),
        "c": [float(x) for x in f.c],
        "n_words": f.n_words,
        "n_unassigned": f.n_unassigned,
    }
    if f.unassigned_tokens is not None:
        doc["unassigned"] = [int(w) for w in f.unassigned_tokens]
    return doc


def save_features(path, header: dict, rows: Sequence[tuple[ClipFeature, int | None]]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for f, label in rows:
            fh.write(json.dumps(feature_to_json(f, label)) + "\n")


def word_sets_from_header(header: dict) -> list[ActivityWordSet]:
    return [
        ActivityWordSet(int(a), frozenset(int(w) for w in ws), float(m))
        for a, ws, m in zip(header["activities"], header["word_sets"], header["covered_mass"])
    ]


def _parse_feature(doc: dict, K: int, where: str) -> tuple[ClipFeature, int | None]:
    try:
        c = np.asarray(doc["c"], dtype=float)
        toks = np.asarray(doc.get("unassigned", []), dtype=np.int64)
        f = ClipFeature(
            clip_id=int(doc["clip_id"]),
            c=c,
            n_words=int(doc["n_words"]),
            unassigned=frozenset(int(w) for w in toks),
            n_unassigned=int(doc["n_unassigned"]),
            unassigned_tokens=toks,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: malformed feature record ({exc})") from None
    if c.size != K:
        raise DataError(f"{where}: feature has {c.size} entries, header declares {K}")
    label = doc.get("label")
    return f, None if label is None else int(label)


def iter_features(path) -> tuple[dict, Iterator[tuple[ClipFeature, int | None]]]:
    fh = open(path)
    first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError:
        fh.close()
        raise DataError(f"{path}:1: header is not valid JSON") from None
    if header.get("schema") != FEATURES_SCHEMA:
        fh.close()
        raise DataError(f"{path}: expected schema {FEATURES_SCHEMA!r}, got {header.get('schema')!r}")
    K = len(header["activities"])

    def rows():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    raise DataError(f"{path}:{lineno}: invalid JSON") from None
                yield _parse_feature(doc, K, f"{path}:{lineno}")

    return header, rows()


def load_features(path) -> tuple[dict, list[ClipFeature], list[int | None]]:
    header, rows = iter_features(path)
    feats, labels = [], []
    for f, label in rows:
        feats.append(f)
        labels.append(label)
    return header, feats, labels
