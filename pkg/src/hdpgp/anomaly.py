"""Three detectors for abnormal clips and the cells that explain them.

RareMotion
    Too many tokens fall outside every typical activity word set.
ConflictingActivity
    An activity is observed far more than the other activities in the clip
    make plausible.  For each coverage coordinate ``i`` a GP regressor
    predicts ``c[i]`` from the remaining coordinates; the clip is flagged when
    ``c[i] > mu + z * sigma``.  Observing *less* than expected is not a
    conflict.
IllegalTransition
    Two consecutive fused labels differ and the learned transition
    probability between them is below a floor.

Conflict regressors use a fixed observation-noise shape.  A coverage value is
a proportion of ``N`` tokens, so its sampling variance is roughly
``p (1 - p) / N``; a floor of one token, ``1 / N**2``, keeps absent
activities from being flagged for a single stray token.  Only the kernel
hyperparameters are learned.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from hdpgp.codebook import ClipDocument, GridSpec, decode
from hdpgp.errors import DataError
from hdpgp.gp.kernels import KernelSpec
from hdpgp.gp.regression import GpRegressor, gp_regress_fit, gp_regress_predict, optimize_regression
from hdpgp.representation import ActivityWordSet, ClipFeature

log = logging.getLogger(__name__)

RARE = "RareMotion"
CONFLICT = "ConflictingActivity"
ILLEGAL = "IllegalTransition"
KINDS = (RARE, CONFLICT, ILLEGAL)

EVENTS_SCHEMA = "anomalies/1"


@dataclass(frozen=True)
class AnomalyThresholds:
    th_rare: int = 50
    th_trans: float = 0.05
    conflict_z: float = 1.96

    def __post_init__(self):
        if not self.th_rare >= 0:
            raise DataError(f"th_rare must be >= 0, got {self.th_rare}")
        if not 0 < self.th_trans < 1:
            raise DataError(f"th_trans must lie in (0, 1), got {self.th_trans}")
        if not self.conflict_z > 0:
            raise DataError(f"conflict_z must be > 0, got {self.conflict_z}")


@dataclass(frozen=True)
class AnomalyEvent:
    clip_id: int
    kind: str
    score: float
    locations: tuple[tuple[int, int], ...] = ()
    detail: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown anomaly kind {self.kind!r}")
        if self.kind == ILLEGAL and self.locations:
            raise DataError("IllegalTransition events carry no locations")
        if self.kind != ILLEGAL and not self.locations:
            raise DataError(f"{self.kind} events need at least one location")

    def to_json(self) -> dict:
        return {
            "clip_id": int(self.clip_id),
            "kind": self.kind,
            "score": float(self.score),
            "locations": [[int(x), int(y)] for x, y in self.locations],
            "detail": self.detail,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AnomalyEvent":
        try:
            return cls(
                int(doc["clip_id"]),
                doc["kind"],
                float(doc["score"]),
                tuple((int(x), int(y)) for x, y in doc.get("locations", ())),
                dict(doc.get("detail", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed anomaly event: {exc}") from None


def localize(words: Iterable[int], grid: GridSpec) -> list[tuple[int, int]]:
    """Distinct cells of the given word indices, sorted by (x, y)."""
    idx = np.fromiter((int(w) for w in words), dtype=np.int64)
    if idx.size == 0:
        return []
    cx, cy, _ = decode(idx, grid)
    return sorted(set(zip(np.atleast_1d(cx).tolist(), np.atleast_1d(cy).tolist())))


# -- rare motions ---------------------------------------------------------------


def detect_rare_motions(clip: ClipDocument, feature: ClipFeature, th: AnomalyThresholds,
                        grid: GridSpec) -> AnomalyEvent | None:
    """Flag the clip when more than ``th_rare`` tokens lie outside every word set."""
    n_out = int(feature.n_unassigned)
    if n_out <= th.th_rare:
        return None
    if feature.unassigned:
        words = feature.unassigned
    else:
        words = set(clip.array().tolist())
    return AnomalyEvent(
        clip.clip_id, RARE, float(n_out), tuple(localize(words, grid)),
        {"n_unassigned": n_out, "n_words": int(feature.n_words)},
    )


# -- conflicting activities -----------------------------------------------------


def coverage_noise_shape(p, n_words) -> np.ndarray:
    """Sampling variance of a coverage proportion ``p`` over ``n_words`` tokens.

    ``(p (1 - p) + 1 / N) / N`` with ``p`` clipped into [0, 1] and ``N >= 1``.
    """
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    n = np.maximum(np.asarray(n_words, dtype=float), 1.0)
    return (p * (1.0 - p) + 1.0 / n) / n


def _init_kernel(Xi, yi) -> KernelSpec:
    scales = tuple(float(max(s, 1e-2)) for s in Xi.std(axis=0))
    return KernelSpec("ard", float(max(yi.std(), 1e-3)), scales, 1.0)


def train_conflict_regressors(X, n_words, optimize: bool = True, max_iter: int = 100) -> list[GpRegressor]:
    """One regressor per coverage coordinate, each fed the other coordinates.

    ``X`` holds the coverage vectors of normal training clips (one row each)
    and ``n_words`` their token counts.  Each regressor uses the constant
    prior mean of its target and the fixed binomial noise shape.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_words = np.asarray(n_words, dtype=float).ravel()
    T, K = X.shape
    if K < 2:
        raise DataError(f"conflict regressors need at least 2 activities, got {K}")
    if T == 0 or n_words.size != T:
        raise DataError(f"{T} training clips but {n_words.size} token counts")
    regs = []
    for i in range(K):
        Xi = np.delete(X, i, axis=1)
        yi = X[:, i]
        v = coverage_noise_shape(yi, n_words)
        kern = _init_kernel(Xi, yi)
        mean = float(yi.mean())
        if optimize:
            kern = optimize_regression(Xi, yi, kern, mean, max_iter=max_iter,
                                       noise_scale=v, learn_noise=False)
        regs.append(gp_regress_fit(Xi, yi, kern, mean, noise_scale=v))
        log.debug("conflict regressor %d: %s", i, kern)
    return regs


def conflict_bounds(C, n_words, regressors: Sequence[GpRegressor]) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and standard deviation of every coordinate of every row of ``C``.

    The deviation combines the latent GP variance with the noise of a new
    observation at the predicted proportion.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n_words = np.asarray(n_words, dtype=float).reshape(-1)
    T, K = C.shape
    if len(regressors) != K:
        raise DataError(f"{len(regressors)} conflict regressors for {K} activities")
    if n_words.size != T:
        raise DataError(f"{T} clips but {n_words.size} token counts")
    mu = np.empty((T, K))
    sd = np.empty((T, K))
    for i, reg in enumerate(regressors):
        m, s = gp_regress_predict(reg, np.delete(C, i, axis=1))
        noise = reg.kernel.noise_sigma_n**2 * coverage_noise_shape(m, n_words)
        mu[:, i] = m
        sd[:, i] = np.sqrt(s * s + noise)
    return mu, sd


def conflict_events(clip_id: int, c, mu, sigma, th: AnomalyThresholds,
                    locate=None, activity_ids: Sequence[int] | None = None) -> list[AnomalyEvent]:
    """Events for the coordinates where ``c > mu + z sigma``.

    A coordinate with no observed tokens (``c == 0``) is never flagged, even
    if a GP mean below zero would put the bound under it.  ``locate(i)``
    returns the cells of the clip's tokens in word set ``i``.
    """
    c = np.asarray(c, dtype=float)
    events = []
    for i in np.nonzero((c > mu + th.conflict_z * sigma) & (c > 0))[0]:
        i = int(i)
        aid = i if activity_ids is None else int(activity_ids[i])
        cells = tuple(locate(i)) if locate is not None else ()
        if not cells:
            continue
        events.append(AnomalyEvent(
            int(clip_id), CONFLICT, float((c[i] - mu[i]) / sigma[i]), cells,
            {"activity": aid, "observed": float(c[i]), "mu": float(mu[i]), "sigma": float(sigma[i])},
        ))
    return events


def _word_set_cells(clip: ClipDocument, ws: ActivityWordSet, grid: GridSpec):
    words = [w for w in set(clip.array().tolist()) if w in ws.words]
    return localize(words, grid)


def detect_conflicts(feature: ClipFeature, regressors: Sequence[GpRegressor], th: AnomalyThresholds,
                     clip: ClipDocument, word_sets: Sequence[ActivityWordSet],
                     grid: GridSpec) -> list[AnomalyEvent]:
    """Conflicting-activity events of one clip, one per flagged activity."""
    if len(regressors) != feature.K:
        raise DataError(f"{len(regressors)} conflict regressors for {feature.K} activities")
    if len(word_sets) != feature.K:
        raise DataError(f"{len(word_sets)} word sets for {feature.K} activities")
    mu, sd = conflict_bounds(feature.c[None, :], [feature.n_words], regressors)
    return conflict_events(
        feature.clip_id, feature.c, mu[0], sd[0], th,
        lambda i: _word_set_cells(clip, word_sets[i], grid),
        [ws.activity_id for ws in word_sets],
    )


# -- illegal transitions --------------------------------------------------------


def detect_illegal_transition(prev_state: int | None, cur_state: int, M, th: AnomalyThresholds,
                              clip_id: int = -1) -> AnomalyEvent | None:
    """Flag a change of state whose probability ``M[cur, prev]`` is below ``th_trans``."""
    M = np.asarray(M, dtype=float)
    L = M.shape[0]
    if not 0 <= cur_state < L or (prev_state is not None and not 0 <= prev_state < L):
        raise DataError(f"state outside 0..{L - 1}: prev={prev_state}, cur={cur_state}")
    if prev_state is None or prev_state == cur_state:
        return None
    m = float(M[cur_state, prev_state])
    if m >= th.th_trans:
        return None
    return AnomalyEvent(int(clip_id), ILLEGAL, float(-np.log(max(m, 1e-300))), (),
                        {"from": int(prev_state), "to": int(cur_state), "m": m})


# -- clip-by-clip detection -----------------------------------------------------


class AnomalyDetector:
    """Runs the enabled detectors clip by clip, carrying the previous fused label.

    ``M`` is the learned transition matrix in the column-from layout and
    ``word_sets`` are the typical activity word sets the features were built on.
    """

    def __init__(self, grid: GridSpec, word_sets: Sequence[ActivityWordSet],
                 regressors: Sequence[GpRegressor], M, th: AnomalyThresholds = AnomalyThresholds(),
                 kinds: Iterable[str] = KINDS, prev: int | None = None):
        self.grid = grid
        self.word_sets = list(word_sets)
        self.regressors = list(regressors)
        self.M = np.asarray(M, dtype=float)
        self.th = th
        self.kinds = frozenset(kinds)
        unknown = self.kinds - set(KINDS)
        if unknown:
            raise DataError(f"unknown anomaly kinds {sorted(unknown)}")
        if CONFLICT in self.kinds and len(self.regressors) != len(self.word_sets):
            raise DataError(f"{len(self.regressors)} conflict regressors for {len(self.word_sets)} activities")
        self.prev = prev

    def __call__(self, clip: ClipDocument, feature: ClipFeature, label: int) -> list[AnomalyEvent]:
        if feature.clip_id != clip.clip_id:
            raise DataError(f"feature of clip {feature.clip_id} paired with clip {clip.clip_id}")
        events = []
        if RARE in self.kinds:
            ev = detect_rare_motions(clip, feature, self.th, self.grid)
            if ev is not None:
                events.append(ev)
        if CONFLICT in self.kinds:
            events.extend(detect_conflicts(feature, self.regressors, self.th, clip, self.word_sets, self.grid))
        if ILLEGAL in self.kinds:
            ev = detect_illegal_transition(self.prev, int(label), self.M, self.th, clip.clip_id)
            if ev is not None:
                events.append(ev)
        self.prev = int(label)
        return events


def detect_all(clips: Sequence[ClipDocument], features: Sequence[ClipFeature], labels,
               grid: GridSpec, word_sets: Sequence[ActivityWordSet], regressors: Sequence[GpRegressor],
               M, th: AnomalyThresholds = AnomalyThresholds(), kinds: Iterable[str] = KINDS,
               prev: int | None = None) -> list[AnomalyEvent]:
    """Events for a whole sequence of clips in temporal order.

    Runs :class:`AnomalyDetector` clip by clip, so the output is bit-identical
    to streaming the same clips.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not len(clips) == len(features) == labels.size:
        raise DataError(f"{len(clips)} clips, {len(features)} features, {labels.size} labels")
    det = AnomalyDetector(grid, word_sets, regressors, M, th, kinds, prev)
    events = []
    for clip, feat, label in zip(clips, features, labels.tolist()):
        events.extend(det(clip, feat, label))
    return events


# -- event files ----------------------------------------------------------------


def save_events(path, events: Iterable[AnomalyEvent], config_hash: str | None = None) -> int:
    n = 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": EVENTS_SCHEMA, "config_hash": config_hash}) + "\n")
        for ev in events:
            fh.write(json.dumps(ev.to_json()) + "\n")
            n += 1
    return n


def load_events(path) -> list[AnomalyEvent]:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty event file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: not valid JSON ({exc})") from None
    if header.get("schema") != EVENTS_SCHEMA:
        raise DataError(f"{path}: expected schema {EVENTS_SCHEMA!r}, got {header.get('schema')!r}")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            out.append(AnomalyEvent.from_json(json.loads(line)))
        except (json.JSONDecodeError, DataError) as exc:
            raise DataError(f"{path}:{n}: {exc}") from None
    return out
