"""Numba kernels for honest causal trees.

Each tree draws its own subsample from a splitmix64 stream seeded by
(seed, tree index), so results do not depend on the thread count.

Node layout per tree: ``feature`` (-1 for leaves), ``threshold``, ``left``,
``right``, ``depth``; leaves carry ``stats`` = means of (W, Y, WY, WW) over the
estimation half and ``count`` = number of estimation samples.
"""

import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # try OpenMP and workqueue before TBB (avoids probing an outdated TBB install)
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


@njit(cache=True)
def _splitmix(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _below(state, n):
    u = (_splitmix(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    k = int(u * n)
    return k if k < n else n - 1


@njit(cache=True)
def _upper_bound(a, v):
    lo, hi = 0, a.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if a[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _grow(X, y, w, treat, seed, tree, n_sub, n_struct, mtry, min_leaf, max_depth,
          feature, threshold, left, right, depth, stats, count, inbag):
    n, p = X.shape
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed) * np.uint64(1000003) + np.uint64(tree) * np.uint64(0x632BE59BD9B4E019)
    _splitmix(state)

    perm = np.arange(n)
    for i in range(n_sub):
        j = i + _below(state, n - i)
        perm[i], perm[j] = perm[j], perm[i]
    for i in range(n_sub):
        inbag[perm[i]] = True
    S = perm[:n_struct].copy()
    E = perm[n_struct:n_sub].copy()

    cap = feature.shape[0]
    feats = np.arange(p)
    stack = np.empty((cap, 5), dtype=np.int64)  # node, s_lo, s_hi, e_lo, e_hi
    stack[0, 0], stack[0, 1], stack[0, 2], stack[0, 3], stack[0, 4] = 0, 0, S.shape[0], 0, E.shape[0]
    top = 1
    n_nodes = 1
    depth[0] = 0
    rho = np.empty(S.shape[0])
    while top > 0:
        top -= 1
        node, s_lo, s_hi, e_lo, e_hi = stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3], stack[top, 4]
        ns = s_hi - s_lo
        ne = e_hi - e_lo
        ts = 0
        for k in range(s_lo, s_hi):
            ts += treat[S[k]]
        te = 0
        for k in range(e_lo, e_hi):
            te += treat[E[k]]
        best_f = -1
        best_thr = 0.0
        splittable = (ts >= 2 * min_leaf and ns - ts >= 2 * min_leaf and te >= 2 * min_leaf
                      and ne - te >= 2 * min_leaf and n_nodes + 2 <= cap
                      and (max_depth < 0 or depth[node] < max_depth))
        if splittable:
            wbar = 0.0
            ybar = 0.0
            for k in range(s_lo, s_hi):
                wbar += w[S[k]]
                ybar += y[S[k]]
            wbar /= ns
            ybar /= ns
            sww = 0.0
            swy = 0.0
            for k in range(s_lo, s_hi):
                dw = w[S[k]] - wbar
                sww += dw * dw
                swy += dw * (y[S[k]] - ybar)
            if sww <= 1e-12 * ns:
                splittable = False
        if splittable:
            tau = swy / sww
            varw = sww / ns
            total = 0.0
            for k in range(s_lo, s_hi):
                dw = w[S[k]] - wbar
                rho[k - s_lo] = dw * ((y[S[k]] - ybar) - tau * dw) / varw
                total += rho[k - s_lo]
            best = total * total / ns + 1e-10 * (1.0 + abs(total * total / ns))
            for m in range(mtry):
                j = m + _below(state, p - m)
                feats[m], feats[j] = feats[j], feats[m]
            for m in range(mtry):
                f = feats[m]
                xs = np.empty(ns)
                for k in range(ns):
                    xs[k] = X[S[s_lo + k], f]
                order = np.argsort(xs, kind="mergesort")
                xe = np.empty(ne)
                for k in range(ne):
                    xe[k] = X[E[e_lo + k], f]
                eorder = np.argsort(xe, kind="mergesort")
                xe_sorted = xe[eorder]
                cum_te = np.zeros(ne + 1, dtype=np.int64)
                for k in range(ne):
                    cum_te[k + 1] = cum_te[k] + treat[E[e_lo + eorder[k]]]
                s_left = 0.0
                t_left = 0
                for k in range(ns - 1):
                    o = order[k]
                    s_left += rho[o]
                    t_left += treat[S[s_lo + o]]
                    x_here = xs[o]
                    x_next = xs[order[k + 1]]
                    if x_here == x_next:
                        continue
                    n_left = k + 1
                    c_left = n_left - t_left
                    if t_left < min_leaf or c_left < min_leaf:
                        continue
                    if ts - t_left < min_leaf or (ns - ts) - c_left < min_leaf:
                        continue
                    thr = x_here + 0.5 * (x_next - x_here)
                    if thr >= x_next:
                        thr = x_here
                    pos = _upper_bound(xe_sorted, thr)
                    et = cum_te[pos]
                    ec = pos - et
                    if et < min_leaf or ec < min_leaf or te - et < min_leaf or (ne - te) - ec < min_leaf:
                        continue
                    s_right = total - s_left
                    score = s_left * s_left / n_left + s_right * s_right / (ns - n_left)
                    if score > best:
                        best = score
                        best_f = f
                        best_thr = thr
        if best_f < 0:
            feature[node] = -1
            if ne > 0:
                a = 0.0
                b = 0.0
                c = 0.0
                d = 0.0
                for k in range(e_lo, e_hi):
                    wi = w[E[k]]
                    yi = y[E[k]]
                    a += wi
                    b += yi
                    c += wi * yi
                    d += wi * wi
                stats[node, 0] = a / ne
                stats[node, 1] = b / ne
                stats[node, 2] = c / ne
                stats[node, 3] = d / ne
            count[node] = ne
            continue
        # partition both halves in place
        i = s_lo
        for k in range(s_lo, s_hi):
            if X[S[k], best_f] <= best_thr:
                S[i], S[k] = S[k], S[i]
                i += 1
        s_mid = i
        i = e_lo
        for k in range(e_lo, e_hi):
            if X[E[k], best_f] <= best_thr:
                E[i], E[k] = E[k], E[i]
                i += 1
        e_mid = i
        feature[node] = best_f
        threshold[node] = best_thr
        lc, rc = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = lc, rc
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3], stack[top, 4] = rc, s_mid, s_hi, e_mid, e_hi
        top += 1
        stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3], stack[top, 4] = lc, s_lo, s_mid, e_lo, e_mid
        top += 1
    return n_nodes


@njit(parallel=True, cache=True)
def grow_forest(X, y, w, treat, seed, n_trees, n_sub, n_struct, mtry, min_leaf, max_depth, cap):
    n = X.shape[0]
    feature = np.full((n_trees, cap), -1, dtype=np.int64)
    threshold = np.zeros((n_trees, cap))
    left = np.full((n_trees, cap), -1, dtype=np.int64)
    right = np.full((n_trees, cap), -1, dtype=np.int64)
    depth = np.zeros((n_trees, cap), dtype=np.int64)
    stats = np.zeros((n_trees, cap, 4))
    count = np.zeros((n_trees, cap), dtype=np.int64)
    inbag = np.zeros((n_trees, n), dtype=np.bool_)
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    for b in prange(n_trees):
        n_nodes[b] = _grow(X, y, w, treat, seed, b, n_sub, n_struct, mtry, min_leaf, max_depth,
                           feature[b], threshold[b], left[b], right[b], depth[b], stats[b], count[b], inbag[b])
    return feature, threshold, left, right, depth, stats, count, inbag, n_nodes


@njit(cache=True)
def _leaf(x, feature, threshold, left, right):
    node = 0
    while feature[node] >= 0:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(parallel=True, cache=True)
def predict_forest(X, feature, threshold, left, right, stats, count, inbag, oob):
    """Forest-weighted local slope; with ``oob`` rows of X are the training rows
    and trees that saw a row in their subsample are skipped for it."""
    n = X.shape[0]
    n_trees = feature.shape[0]
    out = np.full(n, np.nan)
    used = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        a = 0.0
        b = 0.0
        c = 0.0
        d = 0.0
        k = 0
        for t in range(n_trees):
            if oob and inbag[t, i]:
                continue
            leaf = _leaf(X[i], feature[t], threshold[t], left[t], right[t])
            if count[t, leaf] == 0:
                continue
            a += stats[t, leaf, 0]
            b += stats[t, leaf, 1]
            c += stats[t, leaf, 2]
            d += stats[t, leaf, 3]
            k += 1
        used[i] = k
        if k > 0:
            a /= k
            b /= k
            c /= k
            d /= k
            den = d - a * a
            if den > 1e-12:
                out[i] = (c - a * b) / den
    return out, used
