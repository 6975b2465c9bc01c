"""Traffic states: HDP-HMM over clip bags, fitted by direct-assignment Gibbs sampling.

Every clip carries one state label; a state emits the clip's whole bag of
words from its own multinomial (integrated out under Dirichlet(d0)), and
transition rows share the global stick-breaking weights.

Transition matrices are stored "col-from": ``transition[to, from]`` is the
probability of moving from state ``from`` to state ``to``, so columns sum to 1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from hdpgp import _kernels
from hdpgp.codebook import Corpus
from hdpgp.crf import dirichlet_multinomial_log_prob, sample_global_weights, seating_log_prob
from hdpgp.errors import DataError
from hdpgp.hdp import HdpHyperParams, select_typical

log = logging.getLogger(__name__)

STATES_SCHEMA = "states/1"
CONVENTION = "col-from"


@dataclass(frozen=True, eq=False)
class StateModel:
    emission: np.ndarray  # (L, V)
    transition: np.ndarray  # (L, L), transition[to, from]
    beta_weights: np.ndarray  # (L,)
    state_seq: np.ndarray  # (T,)
    typical: tuple[int, ...]
    hyper: HdpHyperParams
    transition_counts: np.ndarray | None = None  # (L, L) counts[from, to]
    initial_counts: np.ndarray | None = None
    tables: np.ndarray | None = None  # (L + 1, L) rows: from-states then the start row
    log_prob: float | None = None
    config_hash: str | None = field(default=None, compare=False)

    @property
    def L(self) -> int:
        return self.emission.shape[0]

    @property
    def row_stochastic(self) -> np.ndarray:
        """Transition matrix with rows = from-state."""
        return self.transition.T

    def clip_counts(self) -> np.ndarray:
        return np.bincount(self.state_seq, minlength=self.L)


def select_typical_states(state_seq, cutoff: float = 0.99, n_states: int | None = None) -> list[int]:
    seq = np.asarray(state_seq, dtype=np.int64)
    if seq.size == 0:
        raise DataError("empty state sequence")
    return select_typical(np.bincount(seq, minlength=n_states or 0), cutoff)


def transition_prob(model: StateModel, from_state: int, to_state: int) -> float:
    L = model.L
    if not (0 <= from_state < L and 0 <= to_state < L):
        raise DataError(f"state ids must lie in [0, {L}), got {from_state}->{to_state}")
    return float(model.transition[to_state, from_state])


def _bags(corpus: Corpus):
    ptr = [0]
    words, counts, ntok = [], [], []
    for clip in corpus.clips:
        w, c = np.unique(clip.array(), return_counts=True)
        words.append(w)
        counts.append(c)
        ptr.append(ptr[-1] + w.size)
        ntok.append(clip.n_words)
    cat = lambda xs: np.concatenate(xs).astype(np.int64) if ptr[-1] else np.zeros(0, np.int64)  # noqa: E731
    return (np.asarray(ptr, dtype=np.int64), cat(words), cat(counts),
            np.asarray(ntok, dtype=np.int64))


def log_joint(y, corpus: Corpus, tables, alpha, gamma, d0) -> float:
    """Collapsed log p(bags, state sequence, table counts)."""
    y = np.asarray(y, dtype=np.int64)
    L = int(y.max()) + 1
    V = corpus.grid.codebook_size
    njk = np.zeros((L, L), dtype=np.int64)
    np.add.at(njk, (y[:-1], y[1:]), 1)
    n0k = np.bincount(y[:1], minlength=L)
    nwk = np.zeros((V, L), dtype=np.int64)
    for clip, s in zip(corpus.clips, y):
        np.add.at(nwk[:, s], clip.array(), 1)
    rest = np.vstack([njk, n0k[None, :]])
    return seating_log_prob(rest, tables, alpha, gamma) + dirichlet_multinomial_log_prob(nwk, d0)


def state_joint_log_prob(model: StateModel, corpus: Corpus) -> float:
    if model.tables is None:
        raise DataError("model carries no table counts (was it loaded from file?)")
    if len(model.state_seq) != len(corpus):
        raise DataError(f"state_seq has {len(model.state_seq)} labels, corpus {len(corpus)} clips")
    h = model.hyper
    return log_joint(model.state_seq, corpus, model.tables, h.alpha, h.gamma, h.d0)


def _grow(st):
    Kcap = st["nk"].size
    z1 = lambda a: np.concatenate([a, np.zeros(Kcap, dtype=a.dtype)])  # noqa: E731
    for key in ("nk", "nclips", "nj", "n0k", "beta", "act"):
        st[key] = z1(st[key])
    st["slot_pos"] = np.concatenate([st["slot_pos"], np.full(Kcap, -1, dtype=np.int64)])
    st["nwk"] = np.hstack([st["nwk"], np.zeros_like(st["nwk"])])
    njk = np.zeros((2 * Kcap, 2 * Kcap), dtype=np.int64)
    njk[:Kcap, :Kcap] = st["njk"]
    st["njk"] = njk


def fit_hdphmm(
    corpus: Corpus,
    hyper: HdpHyperParams = HdpHyperParams(),
    cutoff: float = 0.99,
    init_capacity: int = 16,
    split_merge: int = 5,
) -> StateModel:
    """Learn states and transitions from a temporally ordered corpus.

    Same schedule as the activity sampler: a sequential first sweep, then
    Gibbs sweeps; the post-burn-in sample with the highest joint log
    probability is returned.  A clip alone can rarely open a new state
    against a merged one, so each sweep also tries ``split_merge`` split or
    merge proposals (:func:`_split_merge`); ``0`` switches them off.
    """
    T = len(corpus)
    if T < 2:
        raise DataError("need at least 2 clips to learn state transitions")
    V = corpus.grid.codebook_size
    bag_ptr, bag_words, bag_counts, ntok = _bags(corpus)
    rng = np.random.default_rng(hyper.seed)
    K = init_capacity
    st = dict(
        nwk=np.zeros((V, K), dtype=np.int64),
        nk=np.zeros(K, dtype=np.int64),
        nclips=np.zeros(K, dtype=np.int64),
        njk=np.zeros((K, K), dtype=np.int64),
        nj=np.zeros(K, dtype=np.int64),
        n0k=np.zeros(K, dtype=np.int64),
        beta=np.zeros(K),
        act=np.zeros(K, dtype=np.int64),
        slot_pos=np.full(K, -1, dtype=np.int64),
    )
    y = np.full(T, -1, dtype=np.int64)
    beta_u = np.array([1.0])
    n_act = np.array([0], dtype=np.int64)
    best = None
    for sweep in range(hyper.n_sweeps):
        u_clip = rng.random(T)
        u_new = rng.random(T)
        u_tab = rng.random(T)
        pos = 0
        while True:
            pos = _kernels.hmm_sweep(
                y, bag_ptr, bag_words, bag_counts, ntok, st["nwk"], st["nk"], st["nclips"],
                st["njk"], st["nj"], st["n0k"], st["beta"], beta_u, st["act"], n_act,
                st["slot_pos"], hyper.alpha, hyper.gamma, hyper.d0, u_clip, u_new, pos,
            )
            if pos < 0:
                break
            _grow(st)
        if split_merge:
            _split_merge(st, y, bag_ptr, bag_words, bag_counts, ntok, n_act, hyper, rng, split_merge)
        rest = np.vstack([st["njk"], st["n0k"][None, :]])
        tables = _kernels.sample_tables(rest, st["beta"], hyper.alpha, u_tab)
        act = np.sort(st["act"][: n_act[0]])
        w, beta_u[0] = sample_global_weights(tables[:, act].sum(axis=0), hyper.gamma, rng)
        st["beta"][:] = 0.0
        st["beta"][act] = w
        if sweep >= hyper.n_burnin:
            lp = seating_log_prob(rest, tables, hyper.alpha, hyper.gamma) + (
                dirichlet_multinomial_log_prob(st["nwk"][:, act], hyper.d0)
            )
            if best is None or lp > best[0]:
                best = (lp, y.copy(), tables.copy(), st["beta"].copy())
        if sweep % 100 == 0:
            log.info("hdp-hmm sweep %d: %d states", sweep, n_act[0])

    lp, y_best, tables_best, beta_best = best
    return _finalize(corpus, y_best, tables_best, beta_best, lp, hyper, cutoff)


def _transition_score(y, beta, alpha):
    """``log p(y | beta)`` for the transition and initial-state restaurants."""
    K = beta.size
    rest = np.zeros((K + 1, K), dtype=np.int64)
    np.add.at(rest, (y[:-1], y[1:]), 1)
    rest[K, y[0]] += 1
    used = rest.sum(axis=1) > 0
    ab = alpha * beta
    nz = rest > 0
    s = np.sum(gammaln(alpha) - gammaln(alpha + rest[used].sum(axis=1)))
    s += np.sum(np.where(nz, gammaln(ab[None, :] + rest) - gammaln(np.where(nz, ab[None, :], 1.0)), 0.0))
    return float(s)


def _emission_score(nw, d0):
    n = nw.sum()
    V = nw.size
    pos = nw[nw > 0]
    return float(gammaln(V * d0) - gammaln(n + V * d0) + np.sum(gammaln(pos + d0)) - pos.size * gammaln(d0))


def _recount(st, y):
    for key in ("njk", "nj", "n0k", "nclips"):
        st[key][...] = 0
    np.add.at(st["njk"], (y[:-1], y[1:]), 1)
    st["nj"][:] = st["njk"].sum(axis=1)
    st["n0k"][y[0]] = 1
    st["nclips"][:] = np.bincount(y, minlength=st["nclips"].size)


def _split_merge(st, y, bag_ptr, bag_words, bag_counts, ntok, n_act, hyper, rng, n_moves,
                 n_refine=2):
    """Greedy split and merge proposals on the state partition.

    Each move picks a clip at random and, with even odds, splits its state
    around that clip and a second clip of the same state, or merges a
    uniformly chosen other state into it.  A proposal is kept only if it
    raises ``log p(y | beta) + log p(bags | y)``; split weights are shared in
    proportion to clip counts and merged weights add.
    """
    T = y.size
    V = st["nwk"].shape[0]
    a, d0 = hyper.alpha, hyper.d0
    for _ in range(n_moves):
        i = int(rng.integers(T))
        k = int(y[i])
        beta = st["beta"]
        if rng.random() < 0.5:
            clips = np.nonzero(y == k)[0]
            j = int(clips[rng.integers(clips.size)])
            u_order = rng.random(clips.size)
            u_alloc = rng.random(clips.size * (n_refine + 1))
            if j == i:
                continue
            side, nwB, em_after = _kernels.hmm_propose_split(
                clips, i, j, bag_ptr, bag_words, bag_counts, ntok, V, d0, u_order, u_alloc, n_refine)
            nb = int(np.sum(side == 1))
            if nb == 0 or nb == clips.size:
                continue
            if n_act[0] == st["nk"].size:
                _grow(st)
                beta = st["beta"]
            new = int(_kernels._activate(st["nk"].size, st["act"], n_act, st["slot_pos"]))
            y2 = y.copy()
            y2[clips[side == 1]] = new
            b2 = beta.copy()
            b2[new] = beta[k] * nb / clips.size
            b2[k] = beta[k] - b2[new]
            delta = (em_after - _emission_score(st["nwk"][:, k], d0)
                     + _transition_score(y2, b2, a) - _transition_score(y, beta, a))
            if not delta > 0:
                _kernels._deactivate(new, st["act"], n_act, st["slot_pos"])
                continue
            y[:] = y2
            st["beta"][:] = b2
            st["nwk"][:, k] -= nwB
            st["nwk"][:, new] = nwB
            st["nk"][new] = int(nwB.sum())
            st["nk"][k] -= st["nk"][new]
            _recount(st, y)
        else:
            live = st["act"][: n_act[0]]
            if live.size < 2:
                continue
            l = int(live[rng.integers(live.size)])
            if l == k:
                continue
            y2 = np.where(y == l, k, y)
            b2 = beta.copy()
            b2[k] += b2[l]
            b2[l] = 0.0
            nw = st["nwk"]
            delta = (_emission_score(nw[:, k] + nw[:, l], d0) - _emission_score(nw[:, k], d0)
                     - _emission_score(nw[:, l], d0)
                     + _transition_score(y2, b2, a) - _transition_score(y, beta, a))
            if not delta > 0:
                continue
            y[:] = y2
            st["beta"][:] = b2
            nw[:, k] += nw[:, l]
            nw[:, l] = 0
            st["nk"][k] += st["nk"][l]
            st["nk"][l] = 0
            _kernels._deactivate(l, st["act"], n_act, st["slot_pos"])
            _recount(st, y)


def _finalize(corpus, y, tables, beta, lp, hyper, cutoff):
    V = corpus.grid.codebook_size
    Kcap = beta.size
    nclips = np.bincount(y, minlength=Kcap)
    used = np.nonzero(nclips)[0]
    order = used[np.argsort(-nclips[used], kind="stable")]
    relabel = np.full(Kcap, -1, dtype=np.int64)
    relabel[order] = np.arange(order.size)
    seq = relabel[y]
    L = order.size
    nwk = np.zeros((V, L), dtype=np.int64)
    for clip, s in zip(corpus.clips, seq):
        np.add.at(nwk[:, s], clip.array(), 1)
    nk = nwk.sum(axis=0)
    emission = (nwk.T + hyper.d0) / (nk[:, None] + V * hyper.d0)
    counts = np.zeros((L, L), dtype=np.int64)
    np.add.at(counts, (seq[:-1], seq[1:]), 1)
    w = beta[order]
    rows = counts + hyper.alpha * w[None, :]
    rows = rows / rows.sum(axis=1, keepdims=True)
    tab = np.vstack([tables[order][:, order], tables[-1:, order]])
    typical = tuple(select_typical(np.bincount(seq, minlength=L), cutoff))
    log.info("hdp-hmm: %d states, %d typical, log joint %.2f", L, len(typical), lp)
    return StateModel(
        emission=emission,
        transition=rows.T.copy(),
        beta_weights=w,
        state_seq=seq,
        typical=typical,
        hyper=hyper,
        transition_counts=counts,
        initial_counts=np.bincount(seq[:1], minlength=L),
        tables=tab,
        log_prob=float(lp),
    )


def save_states(model: StateModel, path, config_hash: str | None = None) -> None:
    doc = {
        "schema": STATES_SCHEMA,
        "L": model.L,
        "convention": CONVENTION,
        "emission": model.emission.tolist(),
        "transition": model.transition.tolist(),
        "beta_weights": model.beta_weights.tolist(),
        "state_seq": model.state_seq.tolist(),
        "typical": list(model.typical),
        "hyper": asdict(model.hyper),
        "seed": model.hyper.seed,
        "log_prob": model.log_prob,
        "config_hash": config_hash if config_hash is not None else model.config_hash,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_states(path) -> StateModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != STATES_SCHEMA:
        raise DataError(f"{path}: expected schema {STATES_SCHEMA!r}, got {doc.get('schema')!r}")
    trans = np.asarray(doc["transition"], dtype=float)
    conv = doc.get("convention", CONVENTION)
    if conv == "row-from":
        trans = trans.T.copy()
    elif conv != CONVENTION:
        raise DataError(f"{path}: unknown transition convention {conv!r}")
    L = int(doc["L"])
    if trans.shape != (L, L):
        raise DataError(f"{path}: transition shape {trans.shape}, expected ({L}, {L})")
    return StateModel(
        emission=np.asarray(doc["emission"], dtype=float),
        transition=trans,
        beta_weights=np.asarray(doc.get("beta_weights", np.full(L, 1.0 / L)), dtype=float),
        state_seq=np.asarray(doc["state_seq"], dtype=np.int64),
        typical=tuple(int(s) for s in doc["typical"]),
        hyper=HdpHyperParams(**doc["hyper"]),
        log_prob=doc.get("log_prob"),
        config_hash=doc.get("config_hash"),
    )
