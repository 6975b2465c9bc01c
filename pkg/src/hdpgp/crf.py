"""Chinese-restaurant-franchise bookkeeping shared by the HDP samplers.

Both samplers keep, next to the customer (token or transition) counts, an
explicit table count per restaurant and dish.  The joint probability of the
seating counts is

    prod_r  alpha^{m_r.} prod_k |s(n_rk, m_rk)| / (alpha)^{(n_r.)}
    * gamma^K prod_k (m_.k - 1)! / (gamma)^{(m_..)}

with ``s`` the Stirling numbers of the first kind and ``(x)^{(n)}`` the
rising factorial.
"""

import numpy as np
from scipy.special import gammaln

_STIRLING = np.zeros((1, 1))  # log|s(n, m)|, grown on demand


def log_stirling_table(n_max: int, m_max: int | None = None) -> np.ndarray:
    """Table ``T[n, m] = log|s(n, m)|`` for ``n <= n_max``, ``m <= m_max``.

    Entries with ``m > n`` (and ``s(n, 0)`` for ``n > 0``) are ``-inf``.  The
    recursion only couples neighbouring columns, so truncating at ``m_max``
    keeps every stored entry exact.
    """
    global _STIRLING
    m_max = n_max if m_max is None else min(m_max, n_max)
    have_n, have_m = _STIRLING.shape[0] - 1, _STIRLING.shape[1] - 1
    if n_max <= have_n and m_max <= have_m:
        return _STIRLING
    rows = max(n_max, have_n) + 1
    cols = max(m_max, have_m) + 1
    table = np.full((rows, cols), -np.inf)
    table[0, 0] = 0.0
    with np.errstate(divide="ignore"):
        for n in range(rows - 1):
            # s(n+1, m) = n s(n, m) + s(n, m-1)
            grow = np.log(n) + table[n, 1:] if n > 0 else np.full(cols - 1, -np.inf)
            table[n + 1, 1:] = np.logaddexp(grow, table[n, :-1])
    _STIRLING = table
    return table


def seating_log_prob(counts: np.ndarray, tables: np.ndarray, alpha: float, gamma: float) -> float:
    """Log probability of CRF counts; rows are restaurants, columns dishes.

    Dishes (columns) with no customers anywhere are ignored, so padding and
    label permutations leave the value unchanged.
    """
    counts = np.asarray(counts, dtype=np.int64)
    tables = np.asarray(tables, dtype=np.int64)
    used = counts.sum(axis=0) > 0
    counts = counts[:, used]
    tables = tables[:, used]
    if counts.size == 0:
        return 0.0
    if np.any(tables > counts) or np.any((counts > 0) & (tables < 1)) or np.any(tables < 0):
        return -np.inf
    stir = log_stirling_table(int(counts.max()), int(tables.max()))
    n_r = counts.sum(axis=1)
    m_r = tables.sum(axis=1)
    lp = float(
        np.sum(m_r) * np.log(alpha)
        + stir[counts, tables].sum()
        - np.sum(gammaln(alpha + n_r) - gammaln(alpha))
    )
    m_k = tables.sum(axis=0)
    K = m_k.size
    lp += K * np.log(gamma) + float(np.sum(gammaln(m_k))) - float(
        gammaln(gamma + m_k.sum()) - gammaln(gamma)
    )
    return lp


def dirichlet_multinomial_log_prob(nwk: np.ndarray, d0: float) -> float:
    """Collapsed log marginal of the word counts ``nwk`` (V x K), one Dirichlet(d0) per column."""
    V = nwk.shape[0]
    nk = nwk.sum(axis=0)
    nk = nk[nk > 0]
    nz = nwk[nwk > 0].astype(float)
    return float(
        np.sum(gammaln(V * d0) - gammaln(V * d0 + nk))
        + np.sum(gammaln(d0 + nz) - gammaln(d0))
    )


def sample_global_weights(table_totals: np.ndarray, gamma: float, rng) -> tuple[np.ndarray, float]:
    """Draw ``(beta_1..beta_K, beta_u) ~ Dir(m_.1, ..., m_.K, gamma)``."""
    g = rng.standard_gamma(np.append(table_totals.astype(float), gamma))
    g = g / g.sum()
    return g[:-1], float(g[-1])
