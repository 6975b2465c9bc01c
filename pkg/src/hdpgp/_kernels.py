"""Compiled inner loops for the direct-assignment Gibbs samplers.

All randomness enters as pre-drawn uniforms so that a sweep is a pure function
of its inputs and a ``numpy.random.Generator`` seed fixes the whole chain.

Both sweep kernels keep a compact list ``act[:n_act[0]]`` of live component
slots.  When every slot is taken they return the position they stopped at
(before touching it) so the caller can grow the arrays and resume; a return
value of -1 means the sweep finished.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _deactivate(k, act, n_act, slot_pos):
    pos = slot_pos[k]
    last = act[n_act[0] - 1]
    act[pos] = last
    slot_pos[last] = pos
    slot_pos[k] = -1
    n_act[0] -= 1


@njit(cache=True)
def _activate(Kcap, act, n_act, slot_pos):
    for k in range(Kcap):
        if slot_pos[k] < 0:
            act[n_act[0]] = k
            slot_pos[k] = n_act[0]
            n_act[0] += 1
            return k
    return -1


@njit(cache=True)
def hdp_sweep(words, offsets, z, ndk, nwk, nk, beta, beta_u, act, n_act, slot_pos,
              alpha, gamma, d0, u_tok, u_new, start):
    """One pass of topic resampling over tokens ``start..N-1``."""
    N = words.size
    V = nwk.shape[0]
    Kcap = nk.size
    vd0 = V * d0
    cum = np.empty(Kcap + 1)
    d = 0
    while offsets[d + 1] <= start:
        d += 1
    for i in range(start, N):
        while offsets[d + 1] <= i:
            d += 1
        if n_act[0] == Kcap:
            return i
        w = words[i]
        k = z[i]
        if k >= 0:
            ndk[d, k] -= 1
            nwk[w, k] -= 1
            nk[k] -= 1
            if nk[k] == 0:
                beta_u[0] += beta[k]
                beta[k] = 0.0
                _deactivate(k, act, n_act, slot_pos)
        total = 0.0
        na = n_act[0]
        for a in range(na):
            kk = act[a]
            total += (ndk[d, kk] + alpha * beta[kk]) * (nwk[w, kk] + d0) / (nk[kk] + vd0)
            cum[a] = total
        total += alpha * beta_u[0] / V
        u = u_tok[i] * total
        choice = na
        for a in range(na):
            if u < cum[a]:
                choice = a
                break
        if choice == na:
            k = _activate(Kcap, act, n_act, slot_pos)
            b = 1.0 - (1.0 - u_new[i]) ** (1.0 / gamma)
            beta[k] = b * beta_u[0]
            beta_u[0] = (1.0 - b) * beta_u[0]
        else:
            k = act[choice]
        z[i] = k
        ndk[d, k] += 1
        nwk[w, k] += 1
        nk[k] += 1
    return -1


@njit(cache=True)
def sample_tables(counts, beta, alpha, u):
    """Antoniak draws of CRF table counts for every restaurant row of ``counts``.

    ``counts[r, k]`` customers eating dish ``k`` in restaurant ``r`` are seated
    one by one; customer ``j`` opens a new table with probability
    ``alpha*beta_k / (alpha*beta_k + j)``.
    """
    R, K = counts.shape
    m = np.zeros((R, K), dtype=np.int64)
    pos = 0
    for r in range(R):
        for k in range(K):
            n = counts[r, k]
            if n <= 0:
                continue
            ab = alpha * beta[k]
            c = 0
            for j in range(n):
                if u[pos] * (ab + j) < ab:
                    c += 1
                pos += 1
            m[r, k] = c
    return m


@njit(cache=True)
def _bag_loglik(k, t, bag_ptr, bag_words, bag_counts, ntok, nwk, nk, d0, vd0, is_new):
    s = 0.0
    for b in range(bag_ptr[t], bag_ptr[t + 1]):
        c = bag_counts[b]
        n = 0.0 if is_new else nwk[bag_words[b], k]
        s += math.lgamma(n + c + d0) - math.lgamma(n + d0)
    nkk = 0.0 if is_new else nk[k]
    s += math.lgamma(nkk + vd0) - math.lgamma(nkk + ntok[t] + vd0)
    return s


@njit(cache=True)
def hmm_sweep(y, bag_ptr, bag_words, bag_counts, ntok, nwk, nk, nclips, njk, nj, n0k,
              beta, beta_u, act, n_act, slot_pos, alpha, gamma, d0, u_clip, u_new, start):
    """One pass of state resampling over clips ``start..T-1``.

    ``njk[j, k]`` counts j -> k transitions, ``nj`` their row sums and ``n0k``
    the initial-state restaurant.  Unassigned clips carry ``y = -1``.
    """
    T = y.size
    V = nwk.shape[0]
    Kcap = nk.size
    vd0 = V * d0
    logp = np.empty(Kcap + 1)
    for t in range(start, T):
        if n_act[0] == Kcap:
            return t
        k = y[t]
        j = y[t - 1] if t > 0 else -1
        l = y[t + 1] if t < T - 1 else -1
        if k >= 0:
            for b in range(bag_ptr[t], bag_ptr[t + 1]):
                nwk[bag_words[b], k] -= bag_counts[b]
            nk[k] -= ntok[t]
            nclips[k] -= 1
            if j >= 0:
                njk[j, k] -= 1
                nj[j] -= 1
            else:
                n0k[k] -= 1
            if l >= 0:
                njk[k, l] -= 1
                nj[k] -= 1
            if nclips[k] == 0:
                beta_u[0] += beta[k]
                beta[k] = 0.0
                _deactivate(k, act, n_act, slot_pos)
        na = n_act[0]
        for a in range(na):
            kk = act[a]
            if j >= 0:
                trans = alpha * beta[kk] + njk[j, kk]
            else:
                trans = alpha * beta[kk] + n0k[kk]
            if l >= 0:
                same = 1 if (j == kk and kk == l) else 0
                selfj = 1 if j == kk else 0
                trans *= (alpha * beta[l] + njk[kk, l] + same) / (alpha + nj[kk] + selfj)
            logp[a] = math.log(trans) + _bag_loglik(
                kk, t, bag_ptr, bag_words, bag_counts, ntok, nwk, nk, d0, vd0, False)
        trans_new = alpha * beta_u[0]
        if l >= 0:
            trans_new *= beta[l]
        logp[na] = math.log(trans_new) + _bag_loglik(
            0, t, bag_ptr, bag_words, bag_counts, ntok, nwk, nk, d0, vd0, True)
        mx = logp[0]
        for a in range(1, na + 1):
            if logp[a] > mx:
                mx = logp[a]
        total = 0.0
        for a in range(na + 1):
            total += math.exp(logp[a] - mx)
            logp[a] = total
        u = u_clip[t] * total
        choice = na
        for a in range(na):
            if u < logp[a]:
                choice = a
                break
        if choice == na:
            k = _activate(Kcap, act, n_act, slot_pos)
            b = 1.0 - (1.0 - u_new[t]) ** (1.0 / gamma)
            beta[k] = b * beta_u[0]
            beta_u[0] = (1.0 - b) * beta_u[0]
        else:
            k = act[choice]
        y[t] = k
        for b in range(bag_ptr[t], bag_ptr[t + 1]):
            nwk[bag_words[b], k] += bag_counts[b]
        nk[k] += ntok[t]
        nclips[k] += 1
        if j >= 0:
            njk[j, k] += 1
            nj[j] += 1
        else:
            n0k[k] += 1
        if l >= 0:
            njk[k, l] += 1
            nj[k] += 1
    return -1


@njit(cache=True)
def _topic_score(docs, ws, nd_buf, nw_buf, touched_d, touched_w, beta_k, alpha, d0, vd0):
    """``sum_d [lg(a b + n_dk) - lg(a b)] + DM(n_.k)`` for the tokens listed.

    ``nd_buf``/``nw_buf`` must be zero on entry and are left zero on exit.
    """
    n = docs.size
    nt_d = 0
    nt_w = 0
    for t in range(n):
        d = docs[t]
        if nd_buf[d] == 0:
            touched_d[nt_d] = d
            nt_d += 1
        nd_buf[d] += 1
        w = ws[t]
        if nw_buf[w] == 0:
            touched_w[nt_w] = w
            nt_w += 1
        nw_buf[w] += 1
    ab = alpha * beta_k
    s = 0.0
    for a in range(nt_d):
        d = touched_d[a]
        s += math.lgamma(ab + nd_buf[d]) - math.lgamma(ab)
        nd_buf[d] = 0
    lg_d0 = math.lgamma(d0)
    for a in range(nt_w):
        w = touched_w[a]
        s += math.lgamma(nw_buf[w] + d0) - lg_d0
        nw_buf[w] = 0
    s += math.lgamma(vd0) - math.lgamma(n + vd0)
    return s


@njit(cache=True)
def topic_tokens(z, k):
    n = 0
    for i in range(z.size):
        if z[i] == k:
            n += 1
    out = np.empty(n, dtype=np.int64)
    n = 0
    for i in range(z.size):
        if z[i] == k:
            out[n] = i
            n += 1
    return out


@njit(cache=True)
def _block_logp(tok, lo, hi, doc_of, nd, nw_w, n, ab, d0, vd0):
    """Log predictive weight of adding tokens ``tok[lo:hi]`` (one word type) to a group."""
    s = 0.0
    for t in range(lo, hi):
        d = doc_of[tok[t]]
        s += math.log((nd[d] + ab) * (nw_w + d0) / (n + vd0))
        nd[d] += 1
        nw_w += 1
        n += 1
    for t in range(lo, hi):
        nd[doc_of[tok[t]]] -= 1
    return s


@njit(cache=True)
def propose_split(idx, anchor_a, anchor_b, doc_of, words, D, V, beta_k, alpha, d0, u_order,
                  u_alloc, n_refine):
    """Split the tokens ``idx`` of one topic into two groups seeded by two anchors.

    All tokens of a word type move together.  Word types are allocated one at
    a time in random order with probability proportional to the predictive
    weight of each group, then refined by ``n_refine`` restricted Gibbs passes
    over the word types.  Returns ``(side, delta)``: a 0/1 label per token of
    ``idx`` and the change in the beta-conditional log joint, with the topic
    weight shared in proportion to group sizes.  ``delta`` is ``-inf`` when
    both anchors share a word type or a group ends up empty.
    """
    n = idx.size
    vd0 = V * d0
    ab = alpha * beta_k * 0.5
    ws_all = np.empty(n, dtype=np.int64)
    for t in range(n):
        ws_all[t] = words[idx[t]]
    by_word = np.argsort(ws_all, kind="mergesort")
    tok = idx[by_word]
    # block boundaries, one block per word type
    nb = 0
    for t in range(n):
        if t == 0 or ws_all[by_word[t]] != ws_all[by_word[t - 1]]:
            nb += 1
    lo = np.empty(nb + 1, dtype=np.int64)
    bw = np.empty(nb, dtype=np.int64)
    b = 0
    for t in range(n):
        if t == 0 or ws_all[by_word[t]] != ws_all[by_word[t - 1]]:
            lo[b] = t
            bw[b] = ws_all[by_word[t]]
            b += 1
    lo[nb] = n
    wa = words[anchor_a]
    wb = words[anchor_b]
    side = np.full(n, -1, dtype=np.int64)
    if wa == wb:
        return side, -np.inf
    ndA = np.zeros(D, dtype=np.int64)
    ndB = np.zeros(D, dtype=np.int64)
    bside = np.full(nb, -1, dtype=np.int64)
    nA = 0
    nB = 0
    order = np.argsort(u_order[:nb])
    for pass_ in range(n_refine + 1):
        for o in range(nb):
            bb = order[o]
            l0, l1 = lo[bb], lo[bb + 1]
            size = l1 - l0
            s = bside[bb]
            if s == 0:
                for t in range(l0, l1):
                    ndA[doc_of[tok[t]]] -= 1
                nA -= size
            elif s == 1:
                for t in range(l0, l1):
                    ndB[doc_of[tok[t]]] -= 1
                nB -= size
            if bw[bb] == wa:
                s = 0
            elif bw[bb] == wb:
                s = 1
            else:
                # each word lives in one group only, so its own count there is 0
                la = _block_logp(tok, l0, l1, doc_of, ndA, 0, nA, ab, d0, vd0)
                lb = _block_logp(tok, l0, l1, doc_of, ndB, 0, nB, ab, d0, vd0)
                pa = 1.0 / (1.0 + math.exp(min(lb - la, 700.0)))
                s = 0 if u_alloc[pass_ * nb + o] < pa else 1
            bside[bb] = s
            if s == 0:
                for t in range(l0, l1):
                    ndA[doc_of[tok[t]]] += 1
                nA += size
            else:
                for t in range(l0, l1):
                    ndB[doc_of[tok[t]]] += 1
                nB += size
    # back to the order of idx
    for b in range(nb):
        for t in range(lo[b], lo[b + 1]):
            side[by_word[t]] = bside[b]
    docs = np.empty(n, dtype=np.int64)
    for t in range(n):
        docs[t] = doc_of[idx[t]]
    nd_buf = np.zeros(D, dtype=np.int64)
    nw_buf = np.zeros(V, dtype=np.int64)
    td = np.empty(D, dtype=np.int64)
    tw = np.empty(min(V, n) + 1, dtype=np.int64)
    before = _topic_score(docs, ws_all, nd_buf, nw_buf, td, tw, beta_k, alpha, d0, vd0)
    if nA == 0 or nB == 0:
        return side, -np.inf
    after = _topic_score(docs[side == 0], ws_all[side == 0], nd_buf, nw_buf, td, tw,
                         beta_k * nA / n, alpha, d0, vd0)
    after += _topic_score(docs[side == 1], ws_all[side == 1], nd_buf, nw_buf, td, tw,
                          beta_k * nB / n, alpha, d0, vd0)
    return side, after - before


@njit(cache=True)
def merge_delta(idx_k, idx_l, doc_of, words, D, V, beta_k, beta_l, alpha, d0):
    """Change in the beta-conditional log joint when topic ``l`` joins topic ``k``."""
    vd0 = V * d0
    nk = idx_k.size
    nl = idx_l.size
    docs = np.empty(nk + nl, dtype=np.int64)
    ws = np.empty(nk + nl, dtype=np.int64)
    for t in range(nk):
        docs[t] = doc_of[idx_k[t]]
        ws[t] = words[idx_k[t]]
    for t in range(nl):
        docs[nk + t] = doc_of[idx_l[t]]
        ws[nk + t] = words[idx_l[t]]
    nd_buf = np.zeros(D, dtype=np.int64)
    nw_buf = np.zeros(V, dtype=np.int64)
    td = np.empty(D, dtype=np.int64)
    tw = np.empty(min(V, nk + nl) + 1, dtype=np.int64)
    before = _topic_score(docs[:nk], ws[:nk], nd_buf, nw_buf, td, tw, beta_k, alpha, d0, vd0)
    before += _topic_score(docs[nk:], ws[nk:], nd_buf, nw_buf, td, tw, beta_l, alpha, d0, vd0)
    after = _topic_score(docs, ws, nd_buf, nw_buf, td, tw, beta_k + beta_l, alpha, d0, vd0)
    return after - before


@njit(cache=True)
def _dm_score(nw, n, d0, vd0):
    """Collapsed Dirichlet-multinomial log likelihood of one count column."""
    lg_d0 = math.lgamma(d0)
    s = math.lgamma(vd0) - math.lgamma(n + vd0)
    for w in range(nw.size):
        if nw[w] > 0:
            s += math.lgamma(nw[w] + d0) - lg_d0
    return s


@njit(cache=True)
def hmm_propose_split(clips, anchor_a, anchor_b, bag_ptr, bag_words, bag_counts, ntok, V, d0,
                      u_order, u_alloc, n_refine):
    """Split the clips of one state into two groups seeded by two anchor clips.

    Clips are allocated in random order in proportion to the collapsed bag
    likelihood under each group, then refined by ``n_refine`` restricted
    passes.  Returns ``(side, nwB, emission_after)`` where ``emission_after``
    is the summed Dirichlet-multinomial score of the two groups.
    """
    n = clips.size
    vd0 = V * d0
    nwA = np.zeros(V, dtype=np.int64)
    nwB = np.zeros(V, dtype=np.int64)
    side = np.full(n, -1, dtype=np.int64)
    nA = 0
    nB = 0
    order = np.argsort(u_order)
    for pass_ in range(n_refine + 1):
        for o in range(n):
            c = order[o]
            t = clips[c]
            s = side[c]
            if s == 0:
                for b in range(bag_ptr[t], bag_ptr[t + 1]):
                    nwA[bag_words[b]] -= bag_counts[b]
                nA -= ntok[t]
            elif s == 1:
                for b in range(bag_ptr[t], bag_ptr[t + 1]):
                    nwB[bag_words[b]] -= bag_counts[b]
                nB -= ntok[t]
            if t == anchor_a:
                s = 0
            elif t == anchor_b:
                s = 1
            else:
                la = math.lgamma(nA + vd0) - math.lgamma(nA + ntok[t] + vd0)
                lb = math.lgamma(nB + vd0) - math.lgamma(nB + ntok[t] + vd0)
                for b in range(bag_ptr[t], bag_ptr[t + 1]):
                    w = bag_words[b]
                    cc = bag_counts[b]
                    la += math.lgamma(nwA[w] + cc + d0) - math.lgamma(nwA[w] + d0)
                    lb += math.lgamma(nwB[w] + cc + d0) - math.lgamma(nwB[w] + d0)
                pa = 1.0 / (1.0 + math.exp(min(lb - la, 700.0)))
                s = 0 if u_alloc[pass_ * n + o] < pa else 1
            side[c] = s
            if s == 0:
                for b in range(bag_ptr[t], bag_ptr[t + 1]):
                    nwA[bag_words[b]] += bag_counts[b]
                nA += ntok[t]
            else:
                for b in range(bag_ptr[t], bag_ptr[t + 1]):
                    nwB[bag_words[b]] += bag_counts[b]
                nB += ntok[t]
    after = _dm_score(nwA, nA, d0, vd0) + _dm_score(nwB, nB, d0, vd0)
    return side, nwB, after


@njit(cache=True)
def word_block(tok_by_word, word_ptr, z, w, k):
    """Tokens of word type ``w`` currently assigned to topic ``k``."""
    lo, hi = word_ptr[w], word_ptr[w + 1]
    n = 0
    for a in range(lo, hi):
        if z[tok_by_word[a]] == k:
            n += 1
    out = np.empty(n, dtype=np.int64)
    n = 0
    for a in range(lo, hi):
        if z[tok_by_word[a]] == k:
            out[n] = tok_by_word[a]
            n += 1
    return out


@njit(cache=True)
def move_delta(block, w, k, l, doc_of, ndk, nwk, nk, beta, alpha, d0, V):
    """Change in the beta-conditional log joint when ``block`` (word ``w``) moves from ``k`` to ``l``."""
    c = block.size
    vd0 = V * d0
    abk = alpha * beta[k]
    abl = alpha * beta[l]
    s = 0.0
    # tokens of one word come out of flatten in document order, so equal docs are adjacent
    start = 0
    while start < c:
        d = doc_of[block[start]]
        end = start
        while end < c and doc_of[block[end]] == d:
            end += 1
        m = end - start
        s += math.lgamma(abk + ndk[d, k] - m) - math.lgamma(abk + ndk[d, k])
        s += math.lgamma(abl + ndk[d, l] + m) - math.lgamma(abl + ndk[d, l])
        start = end
    s += math.lgamma(nwk[w, k] - c + d0) - math.lgamma(nwk[w, k] + d0)
    s += math.lgamma(nk[k] + vd0) - math.lgamma(nk[k] - c + vd0)
    s += math.lgamma(nwk[w, l] + c + d0) - math.lgamma(nwk[w, l] + d0)
    s += math.lgamma(nk[l] + vd0) - math.lgamma(nk[l] + c + vd0)
    return s
