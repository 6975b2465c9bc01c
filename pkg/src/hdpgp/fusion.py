"""Sequential clip labelling that trades GP class evidence against state transitions.

Each clip gets an energy per candidate state,

    E(c | prev) = -log max(p_c, floor) - beta * log max(m[c, prev], floor) * (c != prev),

and the label is the candidate with the lowest energy.  An unlikely move away
from the previous clip's state therefore costs extra, while staying put costs
nothing beyond the GP term.  Labelling is greedy: the fused label of clip
``t - 1`` is the ``prev`` of clip ``t``.

Transition matrices use the column-from layout, ``M[to, from]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hdpgp.errors import DataError


@dataclass(frozen=True)
class FusionConfig:
    beta_weight: float = 0.1
    prob_floor: float = 1e-6

    def __post_init__(self):
        if not self.beta_weight >= 0:
            raise DataError(f"beta_weight must be >= 0, got {self.beta_weight}")
        if not self.prob_floor > 0:
            raise DataError(f"prob_floor must be > 0, got {self.prob_floor}")


def _classes(p, classes):
    if classes is None:
        return np.arange(len(p), dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size != len(p):
        raise DataError(f"{len(p)} probabilities for {classes.size} classes")
    return classes


def _check_state(M, s, what):
    if not 0 <= s < M.shape[0]:
        raise DataError(f"{what} state {s} outside 0..{M.shape[0] - 1}")


def energies(p, prev: int | None, M, classes: Sequence[int] | None = None,
             cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Energy of every candidate class; ``p[i]`` belongs to state ``classes[i]``."""
    p = np.asarray(p, dtype=float)
    cls = _classes(p, classes)
    M = np.asarray(M, dtype=float)
    e = -np.log(np.maximum(p, cfg.prob_floor))
    if prev is None or cfg.beta_weight == 0:
        return e
    _check_state(M, prev, "previous")
    if cls.size and (cls.min() < 0 or cls.max() >= M.shape[0]):
        raise DataError("candidate state outside the transition matrix")
    m = M[cls, prev]
    trans = -cfg.beta_weight * np.log(np.maximum(m, cfg.prob_floor))
    return e + np.where(cls == prev, 0.0, trans)


def state_energy(p, prev: int, cand: int, M, cfg: FusionConfig = FusionConfig(),
                 classes: Sequence[int] | None = None) -> float:
    """Energy of labelling the clip ``cand`` after a clip labelled ``prev``."""
    cls = _classes(p, classes)
    hit = np.nonzero(cls == cand)[0]
    if hit.size == 0:
        raise DataError(f"candidate state {cand} is not one of the classes {cls.tolist()}")
    return float(energies(p, prev, M, cls, cfg)[hit[0]])


def fuse_classify(p, prev: int | None, M, cfg: FusionConfig = FusionConfig(),
                  classes: Sequence[int] | None = None) -> int:
    """Lowest-energy state; ``prev=None`` (first clip) falls back to the GP argmax.

    ``np.argmin`` returns the first minimum, so ties go to the earlier class.
    """
    cls = _classes(p, classes)
    if prev is None:
        return int(cls[int(np.argmax(np.asarray(p, dtype=float)))])
    return int(cls[int(np.argmin(energies(p, prev, M, cls, cfg)))])


class StreamFuser:
    """Carries the previous fused label across calls for clip-by-clip use."""

    def __init__(self, M, classes: Sequence[int], cfg: FusionConfig = FusionConfig(),
                 prev: int | None = None):
        self.M = np.asarray(M, dtype=float)
        self.classes = np.asarray(classes, dtype=np.int64)
        self.cfg = cfg
        self.prev = prev

    def __call__(self, p) -> tuple[int, np.ndarray]:
        e = energies(p, self.prev, self.M, self.classes, self.cfg)
        label = fuse_classify(p, self.prev, self.M, self.cfg, self.classes)
        self.prev = label
        return label, e


def fuse_sequence(P, M, classes: Sequence[int], cfg: FusionConfig = FusionConfig(),
                  prev: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy fused labels for the rows of ``P`` (clips in temporal order).

    Returns the labels and the (T, n_classes) energy table.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    fuser = StreamFuser(M, classes, cfg, prev)
    labels = np.empty(P.shape[0], dtype=np.int64)
    E = np.empty_like(P)
    for t, p in enumerate(P):
        labels[t], E[t] = fuser(p)
    return labels, E
