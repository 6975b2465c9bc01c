"""Atomic activities: HDP topic model fitted by direct-assignment Gibbs sampling.

Topic ids are 0-based and ordered by decreasing token count in the returned
model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from hdpgp import _kernels
from hdpgp.codebook import Corpus, flatten
from hdpgp.crf import dirichlet_multinomial_log_prob, sample_global_weights, seating_log_prob
from hdpgp.errors import DataError

log = logging.getLogger(__name__)

ACTIVITIES_SCHEMA = "activities/1"


@dataclass(frozen=True)
class HdpHyperParams:
    gamma: float = 2.0
    alpha: float = 0.5
    d0: float = 0.01
    n_sweeps: int = 1000
    n_burnin: int = 500
    seed: int = 0

    def __post_init__(self):
        if not (self.gamma > 0 and self.alpha > 0 and self.d0 > 0):
            raise DataError("gamma, alpha and d0 must all be positive")
        if self.n_sweeps < 1 or not 0 <= self.n_burnin < self.n_sweeps:
            raise DataError(
                f"need 0 <= n_burnin < n_sweeps, got {self.n_burnin}/{self.n_sweeps}"
            )


def select_typical(counts, cutoff: float = 0.99) -> list[int]:
    """Ids of the components whose accumulated occurrence ratio stays within ``cutoff``.

    Ratios ``n_k / sum(n)`` are ranked in decreasing order (ties by id) and
    accumulated; a component is kept while the running sum is ``<= cutoff``.
    The top-ranked component is always kept.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or counts.size == 0:
        raise DataError("counts must be a non-empty 1-D sequence")
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise DataError("counts must be finite and non-negative")
    total = counts.sum()
    if total <= 0:
        raise DataError("at least one count must be positive")
    if not 0 < cutoff <= 1:
        raise DataError(f"cutoff must lie in (0, 1], got {cutoff}")
    order = np.argsort(-counts, kind="stable")
    acc = np.cumsum(counts[order] / total)
    keep = acc <= cutoff + 1e-12
    keep[0] = True
    return [int(k) for k in order[keep]]


select_typical_activities = select_typical


@dataclass(frozen=True, eq=False)
class ActivityModel:
    phi: np.ndarray  # (K, V) word distribution per activity
    pi0: np.ndarray  # (K,) global topic weights; the leftover mass is 1 - sum
    counts: np.ndarray  # (K,) tokens per topic
    typical: tuple[int, ...]
    hyper: HdpHyperParams
    codebook_size: int
    assignments: tuple[np.ndarray, ...] | None = None
    tables: np.ndarray | None = None  # (D, K) CRF table counts of the sample
    log_prob: float | None = None
    config_hash: str | None = field(default=None, compare=False)

    @property
    def K(self) -> int:
        return self.phi.shape[0]

    def typical_phi(self) -> np.ndarray:
        return self.phi[list(self.typical)]


def _empty_state(D, V, Kcap):
    return dict(
        ndk=np.zeros((D, Kcap), dtype=np.int64),
        nwk=np.zeros((V, Kcap), dtype=np.int64),
        nk=np.zeros(Kcap, dtype=np.int64),
        beta=np.zeros(Kcap),
        act=np.zeros(Kcap, dtype=np.int64),
        slot_pos=np.full(Kcap, -1, dtype=np.int64),
    )


def _grow(st):
    Kcap = st["nk"].size
    new = 2 * Kcap
    st["ndk"] = np.hstack([st["ndk"], np.zeros_like(st["ndk"])])
    st["nwk"] = np.hstack([st["nwk"], np.zeros_like(st["nwk"])])
    st["nk"] = np.concatenate([st["nk"], np.zeros(Kcap, dtype=np.int64)])
    st["beta"] = np.concatenate([st["beta"], np.zeros(Kcap)])
    st["act"] = np.concatenate([st["act"], np.zeros(Kcap, dtype=np.int64)])
    st["slot_pos"] = np.concatenate([st["slot_pos"], np.full(Kcap, -1, dtype=np.int64)])
    log.debug("topic capacity grown to %d", new)


def log_joint(words, offsets, z, tables, alpha, gamma, d0, V) -> float:
    """Collapsed log p(words, assignments, table counts) with topics integrated out."""
    D = offsets.size - 1
    if z.size == 0:
        return 0.0
    K = int(z.max()) + 1
    doc = np.repeat(np.arange(D), np.diff(offsets))
    ndk = np.bincount(doc * K + z, minlength=D * K).reshape(D, K)
    nwk = np.bincount(words * K + z, minlength=V * K).reshape(V, K)
    return seating_log_prob(ndk, tables[:, :K], alpha, gamma) + dirichlet_multinomial_log_prob(
        nwk, d0
    )


def joint_log_prob(model: ActivityModel, corpus: Corpus) -> float:
    """Log joint of the model's sampled assignments under the CRF representation."""
    if model.assignments is None or model.tables is None:
        raise DataError("model carries no assignments (was it loaded from file?)")
    if len(model.assignments) != len(corpus):
        raise DataError(
            f"model has assignments for {len(model.assignments)} clips, corpus has {len(corpus)}"
        )
    if model.tables.shape != (len(corpus), model.K):
        raise DataError(f"tables shape {model.tables.shape} does not match corpus/model")
    for clip, z in zip(corpus.clips, model.assignments):
        if len(z) != clip.n_words:
            raise DataError(f"clip {clip.clip_id}: {len(z)} assignments for {clip.n_words} words")
        if len(z) and (z.min() < 0 or z.max() >= model.K):
            raise DataError(f"clip {clip.clip_id}: topic label outside [0, {model.K})")
    words, offsets = flatten(corpus)
    z = (
        np.concatenate(model.assignments).astype(np.int64)
        if offsets[-1]
        else np.zeros(0, dtype=np.int64)
    )
    h = model.hyper
    return log_joint(words, offsets, z, model.tables, h.alpha, h.gamma, h.d0, model.codebook_size)


def fit_hdp(
    corpus: Corpus,
    hyper: HdpHyperParams = HdpHyperParams(),
    cutoff: float = 0.99,
    init_capacity: int = 32,
    split_merge: int = 20,
) -> ActivityModel:
    """Learn activities from a corpus.

    Runs ``hyper.n_sweeps`` Gibbs sweeps (the first sweep seats tokens one by
    one from an empty state) and returns the post-burn-in sample with the
    highest joint log probability.  Empty clips are skipped.

    Token-level Gibbs moves cannot pull apart a topic that has swallowed two
    activities with disjoint words, so after every sweep ``split_merge``
    split or merge proposals are tried (see :func:`_split_merge`); ``0``
    switches them off.
    """
    if len(corpus) == 0:
        raise DataError("cannot fit an HDP to an empty corpus")
    keep = [i for i, c in enumerate(corpus.clips) if c.n_words > 0]
    if len(keep) < len(corpus):
        log.warning("skipping %d empty clips", len(corpus) - len(keep))
    if not keep:
        raise DataError("corpus has no tokens")
    # empty clips hold no words, so dropping their offsets leaves the rest intact
    words, offsets = flatten(corpus)
    offsets = np.append(offsets[keep], offsets[-1])
    N, D, V = words.size, len(keep), corpus.grid.codebook_size
    doc_of = np.repeat(np.arange(D, dtype=np.int64), np.diff(offsets))
    tok_by_word = np.argsort(words, kind="stable")
    by_word = (tok_by_word, np.searchsorted(words[tok_by_word], np.arange(V + 1)))
    rng = np.random.default_rng(hyper.seed)

    st = _empty_state(D, V, init_capacity)
    z = np.full(N, -1, dtype=np.int64)
    beta_u = np.array([1.0])
    n_act = np.array([0], dtype=np.int64)
    best = None
    for sweep in range(hyper.n_sweeps):
        u_tok = rng.random(N)
        u_new = rng.random(N)
        u_tab = rng.random(N)
        pos = 0
        while True:
            pos = _kernels.hdp_sweep(
                words, offsets, z, st["ndk"], st["nwk"], st["nk"], st["beta"], beta_u,
                st["act"], n_act, st["slot_pos"], hyper.alpha, hyper.gamma, hyper.d0,
                u_tok, u_new, pos,
            )
            if pos < 0:
                break
            _grow(st)
        if split_merge:
            _split_merge(st, z, words, doc_of, by_word, n_act, hyper, rng, split_merge)
        tables = _kernels.sample_tables(st["ndk"], st["beta"], hyper.alpha, u_tab)
        act = np.sort(st["act"][: n_act[0]])
        w, beta_u[0] = sample_global_weights(tables[:, act].sum(axis=0), hyper.gamma, rng)
        st["beta"][:] = 0.0
        st["beta"][act] = w
        if sweep >= hyper.n_burnin:
            lp = seating_log_prob(st["ndk"], tables, hyper.alpha, hyper.gamma) + (
                dirichlet_multinomial_log_prob(st["nwk"][:, act], hyper.d0)
            )
            if best is None or lp > best[0]:
                best = (lp, z.copy(), tables.copy(), st["beta"].copy(), beta_u[0])
        if sweep % 100 == 0:
            log.info("hdp sweep %d: %d topics", sweep, n_act[0])

    lp, z_best, tables_best, beta_best, _ = best
    return _finalize(corpus, keep, words, offsets, z_best, tables_best, beta_best, lp,
                     hyper, cutoff)


def _split_merge(st, z, words, doc_of, by_word, n_act, hyper, rng, n_moves, n_refine=2):
    """Greedy split, merge and re-split proposals on the topic partition.

    Each move picks a token at random (so topic ``k`` is chosen in proportion
    to its size) and, with equal odds, tries one of four proposals:

    * split ``k`` around that token and a second token of ``k``;
    * merge a uniformly chosen other topic ``l`` into ``k``;
    * pool ``k`` with a second topic ``l`` (picked through a second random
      token) and split the pool again, anchored on one token of each;
    * move every token of the picked token's word type out of ``k`` into a
      uniformly chosen other topic.

    Splits move whole word types, so a word shared by two topics can be
    gathered into one.  A proposal is kept only if it raises the log joint of
    the assignments given the global weights ``beta``; split weights are
    shared in proportion to group sizes and merged weights add.  This is a
    mode-finding step: the returned model is still the best joint sample.
    """
    N = z.size
    D = st["ndk"].shape[0]
    V = st["nwk"].shape[0]
    a, d0 = hyper.alpha, hyper.d0
    for _ in range(n_moves):
        i = int(rng.integers(N))
        k = int(z[i])
        kind = int(rng.integers(4))
        if kind == 3:
            live = st["act"][: n_act[0]]
            l = int(live[rng.integers(live.size)])
            if l == k:
                continue
            w = int(words[i])
            block = _kernels.word_block(by_word[0], by_word[1], z, w, k)
            if block.size == st["nk"][k]:
                continue
            delta = _kernels.move_delta(block, w, k, l, doc_of, st["ndk"], st["nwk"], st["nk"],
                                        st["beta"], a, d0, V)
            if delta > 0:
                dd = doc_of[block]
                z[block] = l
                np.subtract.at(st["ndk"][:, k], dd, 1)
                np.add.at(st["ndk"][:, l], dd, 1)
                st["nwk"][w, k] -= block.size
                st["nwk"][w, l] += block.size
                st["nk"][k] -= block.size
                st["nk"][l] += block.size
            continue
        if kind == 1:
            live = st["act"][: n_act[0]]
            l = int(live[rng.integers(live.size)])
            if l == k:
                continue
            idx_k = _kernels.topic_tokens(z, k)
            idx_l = _kernels.topic_tokens(z, l)
            delta = _kernels.merge_delta(idx_k, idx_l, doc_of, words, D, V, st["beta"][k],
                                         st["beta"][l], a, d0)
            if delta > 0:
                _merge_topics(st, z, n_act, k, l, idx_l, doc_of, words)
            continue
        if kind == 0:
            idx = _kernels.topic_tokens(z, k)
            j = int(idx[rng.integers(idx.size)])
            l = k
            b_pool = st["beta"][k]
            pre = 0.0
        else:
            j = int(rng.integers(N))
            l = int(z[j])
            if l == k:
                continue
            idx_k = _kernels.topic_tokens(z, k)
            idx_l = _kernels.topic_tokens(z, l)
            idx = np.concatenate([idx_k, idx_l])
            b_pool = st["beta"][k] + st["beta"][l]
            pre = _kernels.merge_delta(idx_k, idx_l, doc_of, words, D, V, st["beta"][k],
                                       st["beta"][l], a, d0)
        u_order = rng.random(idx.size)
        u_alloc = rng.random(idx.size * (n_refine + 1))
        if j == i:
            continue
        side, delta = _kernels.propose_split(idx, i, j, doc_of, words, D, V, b_pool, a, d0,
                                             u_order, u_alloc, n_refine)
        if not delta + pre > 0:
            continue
        if l == k:
            if n_act[0] == st["nk"].size:
                _grow(st)
            l = int(_kernels._activate(st["nk"].size, st["act"], n_act, st["slot_pos"]))
        _assign_pool(st, z, idx, side, k, l, b_pool, doc_of, words)


def _merge_topics(st, z, n_act, k, l, idx_l, doc_of, words):
    z[idx_l] = k
    for key in ("ndk", "nwk"):
        st[key][:, k] += st[key][:, l]
        st[key][:, l] = 0
    st["nk"][k] += st["nk"][l]
    st["nk"][l] = 0
    st["beta"][k] += st["beta"][l]
    st["beta"][l] = 0.0
    _kernels._deactivate(l, st["act"], n_act, st["slot_pos"])


def _assign_pool(st, z, idx, side, k, l, b_pool, doc_of, words):
    """Relabel the pooled tokens ``idx``: side 0 to topic ``k``, side 1 to ``l``."""
    dd, ww = doc_of[idx], words[idx]
    for t in (k, l):
        old = idx[z[idx] == t]
        np.subtract.at(st["ndk"][:, t], doc_of[old], 1)
        np.subtract.at(st["nwk"][:, t], words[old], 1)
    dest = np.where(side == 0, k, l)
    z[idx] = dest
    np.add.at(st["ndk"], (dd, dest), 1)
    np.add.at(st["nwk"], (ww, dest), 1)
    nl = int(np.sum(side == 1))
    st["nk"][l] = nl
    st["nk"][k] = idx.size - nl
    st["beta"][l] = b_pool * nl / idx.size
    st["beta"][k] = b_pool - st["beta"][l]


def _finalize(corpus, keep, words, offsets, z, tables, beta, lp, hyper, cutoff):
    V = corpus.grid.codebook_size
    Kcap = tables.shape[1]
    nk = np.bincount(z, minlength=Kcap)
    used = np.nonzero(nk)[0]
    order = used[np.argsort(-nk[used], kind="stable")]
    relabel = np.full(Kcap, -1, dtype=np.int64)
    relabel[order] = np.arange(order.size)
    z_new = relabel[z]
    K = order.size
    nwk = np.bincount(words * K + z_new, minlength=V * K).reshape(V, K)
    counts = nwk.sum(axis=0)
    phi = (nwk.T + hyper.d0) / (counts[:, None] + V * hyper.d0)
    D = len(corpus)
    full_tables = np.zeros((D, K), dtype=np.int64)
    full_tables[keep] = tables[:, order]
    assignments = [np.zeros(0, dtype=np.int64) for _ in range(D)]
    for j, i in enumerate(keep):
        assignments[i] = z_new[offsets[j] : offsets[j + 1]]
    typical = tuple(select_typical(counts, cutoff))
    log.info("hdp: %d topics, %d typical, log joint %.2f", K, len(typical), lp)
    return ActivityModel(
        phi=phi,
        pi0=beta[order],
        counts=counts,
        typical=typical,
        hyper=hyper,
        codebook_size=V,
        assignments=tuple(assignments),
        tables=full_tables,
        log_prob=float(lp),
    )


def with_typical(model: ActivityModel, cutoff: float) -> ActivityModel:
    return replace(model, typical=tuple(select_typical(model.counts, cutoff)))


def save_activities(model: ActivityModel, path, config_hash: str | None = None) -> None:
    doc = {
        "schema": ACTIVITIES_SCHEMA,
        "hyper": asdict(model.hyper),
        "codebook_size": model.codebook_size,
        "K": model.K,
        "phi": model.phi.tolist(),
        "pi0": model.pi0.tolist(),
        "counts": model.counts.tolist(),
        "typical": list(model.typical),
        "seed": model.hyper.seed,
        "log_prob": model.log_prob,
        "config_hash": config_hash if config_hash is not None else model.config_hash,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_activities(path) -> ActivityModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != ACTIVITIES_SCHEMA:
        raise DataError(f"{path}: expected schema {ACTIVITIES_SCHEMA!r}, got {doc.get('schema')!r}")
    phi = np.asarray(doc["phi"], dtype=float)
    if phi.shape != (doc["K"], doc["codebook_size"]):
        raise DataError(f"{path}: phi shape {phi.shape} disagrees with K/codebook_size")
    return ActivityModel(
        phi=phi,
        pi0=np.asarray(doc.get("pi0", np.zeros(doc["K"])), dtype=float),
        counts=np.asarray(doc["counts"], dtype=np.int64),
        typical=tuple(int(k) for k in doc["typical"]),
        hyper=HdpHyperParams(**doc["hyper"]),
        codebook_size=int(doc["codebook_size"]),
        log_prob=doc.get("log_prob"),
        config_hash=doc.get("config_hash"),
    )
