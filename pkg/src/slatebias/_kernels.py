"""Jitted per-epoch loss/gradient kernels.

Each kernel consumes the full user-by-item score table and accumulates
d(mean batch loss)/d(score[u, i]) into the dense matrix ``C``. The caller
turns ``C`` into parameter gradients with two small matrix products, which
keeps the epoch cost linear in the number of logged events. All kernels
are sequential and IEEE-strict, so results are bit-reproducible and
independent of worker count.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def mnl_epoch(S_full, users, slates, chosen, C):
    """Slate-softmax negative log-likelihood; returns mean loss."""
    E, k = slates.shape
    inv_e = 1.0 / E
    ex = np.empty(k)
    loss = 0.0
    for e in range(E):
        u = users[e]
        m = -1e300
        for j in range(k):
            s = S_full[u, slates[e, j]]
            if s > m:
                m = s
        z = 0.0
        for j in range(k):
            v = math.exp(S_full[u, slates[e, j]] - m)
            ex[j] = v
            z += v
        c = chosen[e]
        loss += -(S_full[u, slates[e, c]] - m - math.log(z))
        inv_z = inv_e / z
        for j in range(k):
            C[u, slates[e, j]] += ex[j] * inv_z
        C[u, slates[e, c]] -= inv_e
    return loss * inv_e


@njit(cache=True)
def gev_epoch(S_full, users, slates, chosen, nest_of, lam, C, glam):
    """Two-level nested logit negative log-likelihood.

    P(i|S) = exp(s_i/l_m) * (sum_{j in S cap N_m} exp(s_j/l_m))^(l_m-1)
             / sum_m' (sum_{j in S cap N_m'} exp(s_j/l_m'))^(l_m')

    Accumulates d(mean loss)/d(score) into C and d(mean loss)/d(lam) into
    glam. With all lam = 1 this reduces exactly to mnl_epoch.
    """
    E, k = slates.shape
    inv_e = 1.0 / E
    z = np.empty(k)
    L = np.empty(k)
    w = np.empty(k)
    a = np.empty(k)
    cnt = np.empty(k)
    sbar = np.empty(k)
    qn = np.empty(k)
    nj = np.empty(k, dtype=np.int64)
    loss = 0.0
    for e in range(E):
        u = users[e]
        for j in range(k):
            it = slates[e, j]
            nj[j] = nest_of[it]
            z[j] = S_full[u, it] / lam[nj[j]]
        # L[j]: log-sum-exp of z over the positions sharing j's nest
        for j in range(k):
            m = -1e300
            c = 0
            for l in range(k):
                if nj[l] == nj[j]:
                    c += 1
                    if z[l] > m:
                        m = z[l]
            s = 0.0
            for l in range(k):
                if nj[l] == nj[j]:
                    s += math.exp(z[l] - m)
            L[j] = m + math.log(s)
            cnt[j] = c
        for j in range(k):
            w[j] = math.exp(z[j] - L[j])
            a[j] = lam[nj[j]] * L[j]
        amax = -1e300
        for j in range(k):
            if a[j] > amax:
                amax = a[j]
        gs = 0.0
        for j in range(k):
            gs += math.exp(a[j] - amax) / cnt[j]
        G = amax + math.log(gs)
        for j in range(k):
            qn[j] = math.exp(a[j] - G)
        cpos = chosen[e]
        it_c = slates[e, cpos]
        nc = nj[cpos]
        lc = lam[nc]
        loss += -(z[cpos] + (lc - 1.0) * L[cpos] - G)
        # sbar[j]: sum of w_l * s_l over positions in j's nest (raw scores)
        for j in range(k):
            s = 0.0
            for l in range(k):
                if nj[l] == nj[j]:
                    s += w[l] * S_full[u, slates[e, l]]
            sbar[j] = s
        for j in range(k):
            it = slates[e, j]
            dlogp = -qn[j] * w[j]
            if nj[j] == nc:
                dlogp += w[j] * (lc - 1.0) / lc
            if j == cpos:
                dlogp += 1.0 / lc
            C[u, it] += -dlogp * inv_e
            # nest-level denominator term, split evenly over the nest's positions
            glam[nj[j]] += qn[j] * (L[j] - sbar[j] / lam[nj[j]]) / cnt[j] * inv_e
        direct = (-S_full[u, it_c] / (lc * lc) + L[cpos]
                  - (lc - 1.0) * sbar[cpos] / (lc * lc))
        glam[nc] += -direct * inv_e
    return loss * inv_e


@njit(cache=True)
def bl_epoch(S_full, users, slates, chosen, offset, C):
    """Per-item binary cross-entropy: every exposed item is an independent
    chosen/not-chosen observation. Returns (mean loss, d loss/d offset)."""
    E, k = slates.shape
    inv_e = 1.0 / E
    loss = 0.0
    goff = 0.0
    for e in range(E):
        u = users[e]
        for j in range(k):
            it = slates[e, j]
            x = S_full[u, it] + offset
            y = 1.0 if j == chosen[e] else 0.0
            if x > 0.0:
                sp = x + math.log1p(math.exp(-x))
            else:
                sp = math.log1p(math.exp(x))
            loss += sp - y * x
            g = (1.0 / (1.0 + math.exp(-x)) - y) * inv_e
            C[u, it] += g
            goff += g
    return loss * inv_e, goff


@njit(cache=True)
def bpr_epoch(S_full, users, pos_items, negs, weights, C):
    """Pairwise ranking loss against sampled negatives, slate ignored.

    Per event: weight * sum_n -log sigmoid(s_pos - s_neg). The weight is 1
    for the plain variant and an inverse-propensity factor otherwise.
    """
    E, n_neg = negs.shape
    inv_e = 1.0 / E
    loss = 0.0
    for e in range(E):
        u = users[e]
        c = pos_items[e]
        wgt = weights[e]
        sc = S_full[u, c]
        for j in range(n_neg):
            n = negs[e, j]
            x = sc - S_full[u, n]
            if x > 0.0:
                term = math.log1p(math.exp(-x))
            else:
                term = -x + math.log1p(math.exp(x))
            loss += wgt * term
            g = -wgt / (1.0 + math.exp(x)) * inv_e
            C[u, c] += g
            C[u, n] -= g
    return loss * inv_e


def warmup():
    """Compile all kernels on tiny inputs (cached to disk afterwards)."""
    S = np.zeros((2, 3))
    users = np.zeros(1, dtype=np.int64)
    slates = np.array([[0, 1, 2]], dtype=np.int64)
    chosen = np.zeros(1, dtype=np.int64)
    C = np.zeros((2, 3))
    mnl_epoch(S, users, slates, chosen, C)
    gev_epoch(S, users, slates, chosen,
              np.zeros(3, dtype=np.int64), np.ones(1), C, np.zeros(1))
    bl_epoch(S, users, slates, chosen, 0.0, C)
    bpr_epoch(S, users, np.zeros(1, dtype=np.int64),
              np.array([[1]], dtype=np.int64), np.ones(1), C)
