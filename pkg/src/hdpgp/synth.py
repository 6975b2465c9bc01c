"""Synthetic traffic scenes with planted activities, cycling states and injected anomalies.

This is the ground-truth oracle for the learning stages: a scene is a set of
lane-like activities (word distributions on a cell grid), a few traffic states
(activity mixtures) chained by a transition matrix, and motion noise.  A share
of the noise can be drawn from a fixed "clutter" vocabulary (e.g. foliage
flicker in one corner) instead of the whole codebook.  Scenes may also carry
rare activities (a U-turn, say) whose tokens overwrite the head of an
occasional clip (the whole clip in the default scene); each occurrence is logged in the ground truth as a natural rare-motion event.
``evaluate`` scores predicted labels and anomaly events against the truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from hdpgp.anomaly import CONFLICT, ILLEGAL, KINDS, RARE
from hdpgp.codebook import ClipDocument, Corpus, GridSpec, decode, encode
from hdpgp.errors import DataError


@dataclass(frozen=True, eq=False)
class PlantedActivity:
    words: np.ndarray
    probs: np.ndarray
    name: str = ""

    def dense(self, V: int) -> np.ndarray:
        out = np.zeros(V)
        np.add.at(out, self.words, self.probs)
        return out


@dataclass(frozen=True, eq=False)
class SceneSpec:
    grid: GridSpec
    activities: tuple[PlantedActivity, ...]
    states: np.ndarray  # (S, A) activity mixture per state
    transition: np.ndarray  # (S, S) row-stochastic, rows = from
    clips: int = 1000
    tokens_per_clip: int = 300
    noise_rate: float = 0.02
    seed: int = 0
    mixture_concentration: float = 20.0
    state_names: tuple[str, ...] = ()
    clutter_share: float = 0.0
    clutter_words: np.ndarray | None = None
    rare_activities: tuple[PlantedActivity, ...] = ()
    rare_rate: float = 0.0
    rare_tokens: int = 60

    def __post_init__(self):
        V = self.grid.codebook_size
        for a in tuple(self.activities) + tuple(self.rare_activities):
            if np.any(a.words < 0) or np.any(a.words >= V):
                raise DataError(f"activity {a.name!r} has words outside the codebook")
            if np.any(a.probs < 0) or abs(a.probs.sum() - 1) > 1e-9:
                raise DataError(f"activity {a.name!r} is not a distribution")
        S = np.asarray(self.states, dtype=float)
        T = np.asarray(self.transition, dtype=float)
        if S.ndim != 2 or S.shape[1] != len(self.activities):
            raise DataError("states must be an (S, n_activities) matrix")
        if T.shape != (S.shape[0], S.shape[0]):
            raise DataError("transition must be (S, S)")
        if np.any(S < 0) or np.any(np.abs(S.sum(axis=1) - 1) > 1e-9):
            raise DataError("state mixtures must be distributions")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1) > 1e-9):
            raise DataError("transition rows must be distributions")
        if not 0 <= self.noise_rate < 1:
            raise DataError("noise_rate must lie in [0, 1)")
        if not 0 <= self.clutter_share <= 1:
            raise DataError("clutter_share must lie in [0, 1]")
        if self.clutter_share > 0:
            cw = np.asarray(self.clutter_words if self.clutter_words is not None else [], dtype=np.int64)
            if cw.size == 0 or cw.min() < 0 or cw.max() >= V:
                raise DataError("clutter_share > 0 needs valid clutter_words")
            object.__setattr__(self, "clutter_words", cw)
        if not 0 <= self.rare_rate <= 1 or self.rare_tokens < 0:
            raise DataError("rare_rate must lie in [0, 1] and rare_tokens be >= 0")
        if self.rare_rate > 0 and not self.rare_activities:
            raise DataError("rare_rate > 0 needs at least one rare activity")
        if self.clips < 1 or self.tokens_per_clip < 0:
            raise DataError("clips must be >= 1 and tokens_per_clip >= 0")
        object.__setattr__(self, "states", S)
        object.__setattr__(self, "transition", T)

    @property
    def n_states(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class AnomalyRecord:
    clip_ids: tuple[int, ...]
    kind: str
    cells: tuple[tuple[int, int], ...] = ()
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    state_seq: np.ndarray
    mixtures: np.ndarray  # (T, A) per-clip activity proportions
    clip_ids: np.ndarray
    anomalies: tuple[AnomalyRecord, ...] = ()

    def __getitem__(self, sl: slice) -> "GroundTruth":
        ids = set(int(c) for c in self.clip_ids[sl])
        return GroundTruth(
            self.state_seq[sl],
            self.mixtures[sl],
            self.clip_ids[sl],
            tuple(a for a in self.anomalies if set(a.clip_ids) <= ids),
        )

    def select(self, clip_ids) -> "GroundTruth":
        """Truth restricted to ``clip_ids`` (in the given order)."""
        pos = {int(c): i for i, c in enumerate(self.clip_ids)}
        try:
            idx = np.array([pos[int(c)] for c in clip_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"clip {exc} is not in the ground truth") from None
        ids = set(int(c) for c in clip_ids)
        return GroundTruth(
            self.state_seq[idx],
            self.mixtures[idx],
            self.clip_ids[idx],
            tuple(a for a in self.anomalies if set(a.clip_ids) <= ids),
        )


# --------------------------------------------------------------------------
# default desk-scale scene


def lane(grid: GridSpec, cells: Sequence[tuple[int, int]], directions: Iterable[int],
         name: str = "") -> PlantedActivity:
    """A lane-shaped activity over ``cells``; weights vary smoothly along the lane."""
    directions = list(directions)
    n = len(cells)
    along = np.arange(n)
    weight = 1.0 + 0.5 * np.cos(2 * np.pi * along / max(n, 1))
    words, probs = [], []
    for (cx, cy), w in zip(cells, weight):
        for d in directions:
            words.append(encode(cx, cy, d, grid))
            probs.append(w)
    words = np.asarray(words, dtype=np.int64)
    probs = np.asarray(probs, dtype=float)
    order = np.argsort(words, kind="stable")
    words, probs = words[order], probs[order]
    uniq, inv = np.unique(words, return_inverse=True)
    p = np.bincount(inv, weights=probs)
    return PlantedActivity(uniq, p / p.sum(), name)


def _band(xs, ys):
    return [(x, y) for y in ys for x in xs]


def default_activities(grid: GridSpec) -> tuple[PlantedActivity, ...]:
    c, r = grid.n_cols, grid.n_rows
    fx = lambda f: min(c - 1, int(round(f * c)))  # noqa: E731
    fy = lambda f: min(r - 1, int(round(f * r)))  # noqa: E731
    down = [(x, y) for y in range(r) for x in (fx(0.31), fx(0.31) + 1)]
    up = [(x, y) for y in range(r) for x in (fx(0.45), fx(0.45) + 1)]
    left = [(x, y) for x in range(c - 1, -1, -1) for y in (fy(0.33), fy(0.33) + 1)]
    right = [(x, y) for x in range(c) for y in (fy(0.5), fy(0.5) + 1)]
    walk = [(fx(0.76), y) for y in range(fy(0.11), fy(0.86))]
    turn_x = fx(0.58)
    turn_y = fy(0.44)
    turn_down = [(x, y) for y in range(turn_y) for x in (turn_x, turn_x + 1)]
    turn_left = [(x, y) for x in range(turn_x - 1, -1, -1) for y in (turn_y, turn_y + 1)]
    acts = [
        lane(grid, down, [6], "downward"),
        lane(grid, up, [2], "upward"),
        lane(grid, left, [4], "leftward"),
        lane(grid, right, [0], "rightward"),
        lane(grid, walk, [2, 6], "pedestrians"),
    ]
    a_down = lane(grid, turn_down, [6])
    a_left = lane(grid, turn_left, [4])
    n1, n2 = len(turn_down), len(turn_left)
    words = np.concatenate([a_down.words, a_left.words])
    probs = np.concatenate([a_down.probs * n1, a_left.probs * n2])
    acts.append(PlantedActivity(words, probs / probs.sum(), "turn"))
    return tuple(acts)


def cycle_transition(n_states: int, self_loop: float = 0.9) -> np.ndarray:
    T = np.zeros((n_states, n_states))
    for s in range(n_states):
        T[s, s] = self_loop
        T[s, (s + 1) % n_states] += 1.0 - self_loop
    return T


def clutter_region(grid: GridSpec, xs=range(39, 44), ys=range(28, 34)) -> np.ndarray:
    """All-direction words over a block of cells away from every default lane."""
    cells = [(x, y) for y in ys for x in xs if x < grid.n_cols and y < grid.n_rows]
    return np.array(sorted(encode(x, y, d, grid) for x, y in cells for d in range(grid.n_directions)),
                    dtype=np.int64)


def u_turn(grid: GridSpec, x0: int = 2, x1: int = 10, y_in: int = 30, y_out: int = 25) -> PlantedActivity:
    """A U-turn in the lower-left corner: rightward, then up, then back leftward."""
    inbound = [(x, y) for x in range(x0, x1) for y in (y_in, y_in + 1)]
    bend = [(x, y) for y in range(y_in + 1, y_out - 1, -1) for x in (x1, x1 + 1)]
    outbound = [(x, y) for x in range(x1 - 1, x0 - 1, -1) for y in (y_out, y_out + 1)]
    parts = [lane(grid, inbound, [0]), lane(grid, bend, [2]), lane(grid, outbound, [4])]
    sizes = [len(inbound), len(bend), len(outbound)]
    words = np.concatenate([p.words for p in parts])
    probs = np.concatenate([p.probs * n for p, n in zip(parts, sizes)])
    uniq, inv = np.unique(words, return_inverse=True)
    p = np.bincount(inv, weights=probs)
    return PlantedActivity(uniq, p / p.sum(), "u-turn")


def default_scene(seed: int = 0, clips: int = 1000, **kw) -> SceneSpec:
    """45x36-cell junction with 6 activities and 4 states cycling V -> VT -> L -> R.

    About 3% of clips also contain a U-turn (``rare_rate=0`` switches it off).
    """
    grid = GridSpec.from_cells(45, 36, 8)
    kw.setdefault("mixture_concentration", float("inf"))
    kw.setdefault("rare_rate", 0.03)
    kw.setdefault("rare_tokens", kw.get("tokens_per_clip", 300))
    if kw["rare_rate"] > 0:
        kw.setdefault("rare_activities", (u_turn(grid),))
    kw.setdefault("clutter_share", 0.0)
    if kw["clutter_share"] > 0:
        kw.setdefault("clutter_words", clutter_region(grid))
    acts = default_activities(grid)
    states = np.array(
        [
            # down  up   left right walk turn
            [0.40, 0.40, 0.00, 0.00, 0.20, 0.00],  # vertical
            [0.35, 0.00, 0.00, 0.00, 0.00, 0.65],  # vertical + turn
            [0.00, 0.00, 0.70, 0.00, 0.30, 0.00],  # leftward
            [0.00, 0.00, 0.00, 0.60, 0.20, 0.20],  # rightward
        ]
    )
    return SceneSpec(
        grid=grid,
        activities=acts,
        states=states,
        transition=cycle_transition(4, kw.pop("self_loop", 0.9)),
        clips=clips,
        seed=seed,
        state_names=("vertical", "vertical-turn", "leftward", "rightward"),
        **kw,
    )


# --------------------------------------------------------------------------
# generation


def _clip_mixture(spec: SceneSpec, state: int, rng) -> np.ndarray:
    base = spec.states[state]
    theta = np.zeros_like(base)
    support = np.nonzero(base)[0]
    if support.size == 1 or not np.isfinite(spec.mixture_concentration):
        theta[support] = base[support]
    else:
        theta[support] = rng.dirichlet(spec.mixture_concentration * base[support])
    return theta


def _draw_tokens(spec: SceneSpec, theta: np.ndarray, n: int, rng) -> np.ndarray:
    V = spec.grid.codebook_size
    parts = rng.multinomial(n, np.append(theta * (1 - spec.noise_rate), spec.noise_rate))
    out = []
    for a, k in enumerate(parts[:-1]):
        if k:
            act = spec.activities[a]
            out.append(rng.choice(act.words, size=k, p=act.probs))
    if parts[-1]:
        n_clutter = rng.binomial(parts[-1], spec.clutter_share) if spec.clutter_share > 0 else 0
        if n_clutter:
            out.append(rng.choice(spec.clutter_words, size=n_clutter))
        out.append(rng.integers(0, V, size=parts[-1] - n_clutter))
    if not out:
        return np.zeros(0, dtype=np.int64)
    words = np.concatenate(out).astype(np.int64)
    return rng.permutation(words)


def generate(spec: SceneSpec) -> tuple[Corpus, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    S = spec.n_states
    states = np.zeros(spec.clips, dtype=np.int64)
    states[0] = rng.integers(S)
    for t in range(1, spec.clips):
        states[t] = rng.choice(S, p=spec.transition[states[t - 1]])
    clips, mixtures = [], []
    for t, s in enumerate(states):
        theta = _clip_mixture(spec, s, rng)
        words = _draw_tokens(spec, theta, spec.tokens_per_clip, rng)
        mixtures.append(theta)
        clips.append(ClipDocument(t, (t * 75, (t + 1) * 75), tuple(int(w) for w in words)))
    records = _plant_rare(spec, clips) if spec.rare_rate > 0 else []
    corpus = Corpus(spec.grid, tuple(clips), 75)
    gt = GroundTruth(states, np.array(mixtures), np.arange(spec.clips), tuple(records))
    return corpus, gt


def _plant_rare(spec: SceneSpec, clips: list) -> list:
    """Overwrite the head of randomly chosen clips with rare-activity tokens, in place.

    Uses its own random stream so that switching rare events on or off leaves
    the rest of the scene unchanged.
    """
    rng = np.random.default_rng([spec.seed, 104729])
    hits = np.nonzero(rng.random(len(clips)) < spec.rare_rate)[0]
    records = []
    for i in hits.tolist():
        a = int(rng.integers(len(spec.rare_activities)))
        act = spec.rare_activities[a]
        clip = clips[i]
        k = min(spec.rare_tokens, len(clip.words))
        extra = rng.choice(act.words, size=k, p=act.probs)
        clips[i] = ClipDocument(clip.clip_id, clip.frame_range,
                                tuple(int(w) for w in extra) + clip.words[k:])
        ex, ey, _ = decode(np.unique(extra), spec.grid)
        cells = tuple(sorted(set(zip(ex.tolist(), ey.tolist()))))
        records.append(AnomalyRecord((int(clip.clip_id),), RARE, cells,
                                     {"natural": True, "activity": act.name, "tokens": k}))
    return records


# --------------------------------------------------------------------------
# anomaly injection


@dataclass(frozen=True)
class Injection:
    clip_id: int
    kind: str
    params: dict = field(default_factory=dict)


def reverse_lane_cells(spec: SceneSpec, n_cells: int = 40, rng=None) -> tuple[list, int]:
    """Cells of a planted lane traversed against its dominant direction."""
    act = spec.activities[0]
    cx, cy, d = decode(act.words, spec.grid)
    cells = sorted(set(zip(cx.tolist(), cy.tolist())))
    if rng is not None:
        start = int(rng.integers(0, max(1, len(cells) - n_cells + 1)))
    else:
        start = 0
    direction = int((np.bincount(d).argmax() + 4) % 8)
    return cells[start : start + n_cells], direction


def _is_illegal(spec: SceneSpec, a: int, b: int, floor: float) -> bool:
    return a != b and spec.transition[a, b] < floor


def inject_anomalies(
    corpus: Corpus,
    gt: GroundTruth,
    plan: Sequence[Injection],
    spec: SceneSpec,
    illegal_floor: float = 1e-3,
) -> tuple[Corpus, GroundTruth]:
    """Apply an injection plan; returns new corpus and truth with the log extended.

    RareMotion
        ``params``: ``cells`` (list of (x, y)), ``direction``, ``frames`` (2).
        Replaces the first ``len(cells) * frames`` tokens by those words.
    ConflictingActivity
        ``params``: ``activity`` (optional; default the first activity absent
        from the clip's state), ``fraction`` (0.25).  Adds
        ``fraction * N`` tokens drawn from that activity.
    IllegalTransition
        ``params``: ``state`` (optional; default the least likely successor of
        the previous clip's state).  Overwrites the clip's state and redraws
        its tokens.  The event also spans the following clip when returning to
        the original sequence is itself illegal.
    """
    if not plan:
        return corpus, gt
    rng = np.random.default_rng(spec.seed + 7919)
    pos = {int(c.clip_id): i for i, c in enumerate(corpus.clips)}
    clips = list(corpus.clips)
    states = gt.state_seq.copy()
    mixtures = gt.mixtures.copy()
    records = list(gt.anomalies)
    grid = corpus.grid
    for inj in plan:
        if inj.clip_id not in pos:
            raise DataError(f"injection clip_id {inj.clip_id} not in corpus")
        i = pos[inj.clip_id]
        clip = clips[i]
        words = np.asarray(clip.words, dtype=np.int64)
        p = dict(inj.params)
        if inj.kind == RARE:
            cells = [tuple(c) for c in p.get("cells") or reverse_lane_cells(spec, 40, rng)[0]]
            direction = int(p.get("direction", reverse_lane_cells(spec, 40)[1]))
            frames = int(p.get("frames", 2))
            cx = np.array([c[0] for c in cells])
            cy = np.array([c[1] for c in cells])
            alien = np.tile(encode(cx, cy, np.full(len(cells), direction), grid), frames)
            n = min(alien.size, words.size)
            new = np.concatenate([alien, words[n:]]) if words.size >= alien.size else alien
            records.append(AnomalyRecord((inj.clip_id,), RARE, tuple(cells),
                                         {"direction": direction, "tokens": int(alien.size)}))
        elif inj.kind == CONFLICT:
            s = int(states[i])
            absent = np.nonzero(spec.states[s] == 0)[0]
            a = int(p.get("activity", absent[0] if absent.size else 0))
            k = int(round(p.get("fraction", 0.25) * max(words.size, 1)))
            act = spec.activities[a]
            extra = rng.choice(act.words, size=k, p=act.probs)
            new = np.concatenate([words, extra])
            ex, ey, _ = decode(np.unique(extra), grid)
            cells = tuple(sorted(set(zip(ex.tolist(), ey.tolist()))))
            records.append(AnomalyRecord((inj.clip_id,), CONFLICT, cells, {"activity": a}))
        elif inj.kind == ILLEGAL:
            if i == 0:
                raise DataError("IllegalTransition cannot be injected into the first clip")
            prev = int(states[i - 1])
            row = spec.transition[prev].copy()
            row[prev] = np.inf
            target = int(p.get("state", int(np.argmin(row))))
            if not _is_illegal(spec, prev, target, illegal_floor):
                raise DataError(f"transition {prev}->{target} is not illegal in the scene")
            states[i] = target
            theta = _clip_mixture(spec, target, rng)
            mixtures[i] = theta
            new = _draw_tokens(spec, theta, max(words.size, spec.tokens_per_clip), rng)
            span = [inj.clip_id]
            if i + 1 < len(clips) and _is_illegal(spec, target, int(states[i + 1]), illegal_floor):
                span.append(int(clips[i + 1].clip_id))
            records.append(AnomalyRecord(tuple(span), ILLEGAL, (), {"from": prev, "to": target}))
        else:
            raise DataError(f"unknown anomaly kind {inj.kind!r}")
        clips[i] = ClipDocument(clip.clip_id, clip.frame_range, tuple(int(w) for w in new))
    out = Corpus(corpus.grid, tuple(clips), corpus.clip_length)
    return out, GroundTruth(states, mixtures, gt.clip_ids.copy(), tuple(records))


def plan_injections(gt: GroundTruth, per_kind: int = 10, seed: int = 0,
                    min_gap: int = 4) -> list[Injection]:
    """Spread ``per_kind`` injections of every kind over the clips, keeping them apart.

    Slots next to a clip that already carries an event are skipped, so every
    injected event stays separable from the ones the scene produced itself.
    """
    rng = np.random.default_rng(seed)
    n = len(gt.clip_ids)
    total = per_kind * len(KINDS)
    pos = {int(c): i for i, c in enumerate(gt.clip_ids)}
    busy = set()
    for rec in gt.anomalies:
        for c in rec.clip_ids:
            if int(c) in pos:
                busy.update(range(pos[int(c)] - 1, pos[int(c)] + 2))
    slots = np.array([s for s in range(1, n - 1, min_gap) if s not in busy and s + 1 not in busy],
                     dtype=np.int64)
    if slots.size < total:
        raise DataError(f"{n} clips too few for {total} injections with gap {min_gap}")
    picks = np.sort(rng.choice(slots, size=total, replace=False))
    kinds = rng.permutation(np.repeat(np.arange(len(KINDS)), per_kind))
    return [Injection(int(gt.clip_ids[p]), KINDS[k]) for p, k in zip(picks, kinds)]


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    confusion: np.ndarray
    class_names: list
    per_class_accuracy: np.ndarray
    average_accuracy: float
    accuracy: float
    alignment: dict
    tpr: float | None = None
    fpr: float | None = None
    n_events: int = 0
    n_detected: int = 0
    n_false_clips: int = 0
    n_clips: int = 0
    per_kind: dict = field(default_factory=dict)
    topic_matching: list | None = None
    tpr_injected: float | None = None
    n_injected: int = 0
    n_injected_detected: int = 0

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "class_names": [str(c) for c in self.class_names],
            "per_class_accuracy": self.per_class_accuracy.tolist(),
            "average_accuracy": self.average_accuracy,
            "accuracy": self.accuracy,
            "alignment": {str(k): v for k, v in self.alignment.items()},
            "tpr": self.tpr,
            "fpr": self.fpr,
            "n_events": self.n_events,
            "n_detected": self.n_detected,
            "n_false_clips": self.n_false_clips,
            "n_clips": self.n_clips,
            "per_kind": self.per_kind,
            "topic_matching": self.topic_matching,
            "tpr_injected": self.tpr_injected,
            "n_injected": self.n_injected,
            "n_injected_detected": self.n_injected_detected,
        }


def per_class_accuracy(confusion) -> np.ndarray:
    """Diagonal over row sums; rows are true classes."""
    c = np.asarray(confusion, dtype=float)
    rows = c.sum(axis=1)
    diag = np.diag(c[:, : c.shape[0]])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, diag / rows, np.nan)


def false_positive_rate(n_false_clips: int, n_test_clips: int) -> float:
    if n_test_clips <= 0:
        raise DataError("need at least one test clip")
    return n_false_clips / n_test_clips


def align_labels(pred, truth) -> dict:
    """Map predicted labels onto true labels maximizing total overlap (Hungarian)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    p_lab = np.unique(pred)
    t_lab = np.unique(truth)
    overlap = np.zeros((p_lab.size, t_lab.size))
    for i, a in enumerate(p_lab):
        m = pred == a
        for j, b in enumerate(t_lab):
            overlap[i, j] = np.sum(m & (truth == b))
    rows, cols = linear_sum_assignment(-overlap)
    return {p_lab[r].item(): t_lab[c].item() for r, c in zip(rows, cols)}


def _event_fields(ev):
    if isinstance(ev, dict):
        return int(ev["clip_id"]), ev["kind"]
    return int(ev.clip_id), ev.kind


def evaluate(pred_labels, gt: GroundTruth, anomaly_events=None) -> EvalReport:
    pred = np.asarray(pred_labels)
    truth = np.asarray(gt.state_seq)
    if pred.shape != truth.shape:
        raise DataError(f"{pred.size} predicted labels for {truth.size} clips")
    mapping = align_labels(pred, truth)
    classes = list(np.unique(truth).tolist())
    idx = {c: i for i, c in enumerate(classes)}
    n = len(classes)
    conf = np.zeros((n, n + 1), dtype=np.int64)  # last column: unmatched predicted labels
    for p, t in zip(pred.tolist(), truth.tolist()):
        col = idx.get(mapping.get(p), n)
        conf[idx[t], col] += 1
    if conf[:, n].sum() == 0:
        conf = conf[:, :n]
    acc = per_class_accuracy(conf)
    report = EvalReport(
        confusion=conf,
        class_names=classes,
        per_class_accuracy=acc,
        average_accuracy=float(np.nanmean(acc)),
        accuracy=float(np.trace(conf[:, :n]) / max(pred.size, 1)),
        alignment=mapping,
        n_clips=int(pred.size),
    )
    if anomaly_events is not None:
        flagged: dict[int, set] = {}
        for ev in anomaly_events:
            cid, kind = _event_fields(ev)
            flagged.setdefault(cid, set()).add(kind)
        covered = set()
        per_kind = {k: [0, 0] for k in KINDS}
        detected = 0
        inj_total = inj_hit = 0
        for rec in gt.anomalies:
            covered.update(rec.clip_ids)
            hit = any(rec.kind in flagged.get(c, ()) for c in rec.clip_ids)
            detected += hit
            if not rec.detail.get("natural", False):
                inj_total += 1
                inj_hit += hit
            per_kind.setdefault(rec.kind, [0, 0])
            per_kind[rec.kind][0] += hit
            per_kind[rec.kind][1] += 1
        false_clips = sum(1 for c in flagged if c not in covered)
        report.n_events = len(gt.anomalies)
        report.n_detected = int(detected)
        report.tpr = detected / len(gt.anomalies) if gt.anomalies else None
        report.n_injected = inj_total
        report.n_injected_detected = inj_hit
        report.tpr_injected = inj_hit / inj_total if inj_total else None
        report.n_false_clips = int(false_clips)
        report.fpr = false_positive_rate(false_clips, int(pred.size))
        report.per_kind = {k: {"detected": v[0], "total": v[1]} for k, v in per_kind.items()}
    return report


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def match_topics(learned: np.ndarray, planted: np.ndarray) -> list[tuple[int, int, float]]:
    """Greedy max-cosine matching without replacement.

    ``learned`` (K, V) and ``planted`` (P, V) are distributions over words.
    Returns ``(planted_index, learned_index, cosine)`` triples in the order
    they were matched.
    """
    learned = np.atleast_2d(np.asarray(learned, dtype=float))
    planted = np.atleast_2d(np.asarray(planted, dtype=float))
    if learned.shape[0] == 0 or planted.shape[0] == 0:
        raise DataError("match_topics needs non-empty inputs")
    ln = learned / np.maximum(np.linalg.norm(learned, axis=1, keepdims=True), 1e-300)
    pn = planted / np.maximum(np.linalg.norm(planted, axis=1, keepdims=True), 1e-300)
    cos = pn @ ln.T
    out = []
    free_p = set(range(cos.shape[0]))
    free_l = set(range(cos.shape[1]))
    while free_p and free_l:
        best = max(((cos[p, l], -p, -l) for p in free_p for l in free_l))
        c, p, l = best[0], -best[1], -best[2]
        out.append((p, l, float(c)))
        free_p.discard(p)
        free_l.discard(l)
    return out


# --------------------------------------------------------------------------
# persistence


def scene_to_dict(spec: SceneSpec) -> dict:
    g = spec.grid
    return {
        "grid": {
            "frame_width": g.frame_width,
            "frame_height": g.frame_height,
            "cell_size": g.cell_size,
            "magnitude_threshold": g.magnitude_threshold,
        },
        "activities": [
            {"name": a.name, "words": a.words.tolist(), "probs": a.probs.tolist()}
            for a in spec.activities
        ],
        "states": spec.states.tolist(),
        "state_names": list(spec.state_names),
        "transition": spec.transition.tolist(),
        "clips": spec.clips,
        "tokens_per_clip": spec.tokens_per_clip,
        "noise_rate": spec.noise_rate,
        "mixture_concentration": spec.mixture_concentration,
        "seed": spec.seed,
        "clutter_share": spec.clutter_share,
        "clutter_words": None if spec.clutter_words is None else spec.clutter_words.tolist(),
        "rare_activities": [
            {"name": a.name, "words": a.words.tolist(), "probs": a.probs.tolist()}
            for a in spec.rare_activities
        ],
        "rare_rate": spec.rare_rate,
        "rare_tokens": spec.rare_tokens,
    }


def _activities_from(docs) -> tuple[PlantedActivity, ...]:
    return tuple(
        PlantedActivity(
            np.asarray(a["words"], dtype=np.int64),
            np.asarray(a["probs"], dtype=float) / np.sum(a["probs"]),
            a.get("name", ""),
        )
        for a in docs
    )


def scene_from_dict(doc: dict) -> SceneSpec:
    """Build a scene from JSON; keys left out fall back to :func:`default_scene`."""
    base = default_scene(seed=int(doc.get("seed", 0)))
    grid = base.grid
    if "grid" in doc:
        grid = GridSpec(**doc["grid"])
    acts = base.activities
    if "activities" in doc:
        acts = _activities_from(doc["activities"])
    elif grid != base.grid:
        acts = default_activities(grid)
    rare_rate = float(doc.get("rare_rate", base.rare_rate))
    if "rare_activities" in doc:
        rare = _activities_from(doc["rare_activities"])
    elif rare_rate > 0:
        rare = (u_turn(grid),) if grid != base.grid else base.rare_activities
    else:
        rare = ()
    clutter_share = float(doc.get("clutter_share", 0.0))
    clutter_words = doc.get("clutter_words")
    if clutter_share > 0 and clutter_words is None:
        clutter_words = clutter_region(grid)
    states = np.asarray(doc.get("states", base.states), dtype=float)
    if "transition" in doc:
        trans = np.asarray(doc["transition"], dtype=float)
    elif "self_loop" in doc:
        trans = cycle_transition(states.shape[0], float(doc["self_loop"]))
    else:
        trans = base.transition
    return SceneSpec(
        grid=grid,
        activities=acts,
        states=states,
        transition=trans,
        clips=int(doc.get("clips", base.clips)),
        tokens_per_clip=int(doc.get("tokens_per_clip", base.tokens_per_clip)),
        noise_rate=float(doc.get("noise_rate", base.noise_rate)),
        seed=int(doc.get("seed", 0)),
        mixture_concentration=float(doc.get("mixture_concentration", base.mixture_concentration)),
        state_names=tuple(doc.get("state_names", base.state_names if "states" not in doc else ())),
        clutter_share=clutter_share,
        clutter_words=None if clutter_words is None else np.asarray(clutter_words, dtype=np.int64),
        rare_activities=rare,
        rare_rate=rare_rate,
        rare_tokens=int(doc.get("rare_tokens", base.rare_tokens)),
    )


def truth_to_dict(gt: GroundTruth) -> dict:
    return {
        "schema": "truth/1",
        "clip_ids": gt.clip_ids.tolist(),
        "state_seq": gt.state_seq.tolist(),
        "mixtures": gt.mixtures.tolist(),
        "anomalies": [
            {"clip_ids": list(a.clip_ids), "kind": a.kind, "cells": [list(c) for c in a.cells],
             "detail": a.detail}
            for a in gt.anomalies
        ],
    }


def truth_from_dict(doc: dict) -> GroundTruth:
    if doc.get("schema") != "truth/1":
        raise DataError(f"expected schema 'truth/1', got {doc.get('schema')!r}")
    return GroundTruth(
        np.asarray(doc["state_seq"], dtype=np.int64),
        np.asarray(doc["mixtures"], dtype=float),
        np.asarray(doc["clip_ids"], dtype=np.int64),
        tuple(
            AnomalyRecord(tuple(a["clip_ids"]), a["kind"], tuple(tuple(c) for c in a["cells"]),
                          a.get("detail", {}))
            for a in doc.get("anomalies", [])
        ),
    )


def save_truth(gt: GroundTruth, path, config_hash: str | None = None) -> None:
    doc = truth_to_dict(gt)
    if config_hash is not None:
        doc["config_hash"] = config_hash
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_truth(path) -> GroundTruth:
    with open(path) as fh:
        return truth_from_dict(json.load(fh))
