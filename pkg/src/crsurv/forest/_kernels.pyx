# cython: language_level=3
"""Compiled hot loops for tree growing.

Every function here has a numpy twin in ``_pykernels.py`` with the same
signature; ``_backend`` picks one at import time.  The CART builder consumes
its own splitmix64 stream so both backends grow identical trees from the same
seed.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _next(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] += GOLDEN
    z = state[0]
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _next_double(uint64_t* state) noexcept nogil:
    return <double>(_next(state) >> 11) * (1.0 / 9007199254740992.0)


def tree_seed(uint64_t base, uint64_t tree_index):
    cdef uint64_t s = base + (tree_index + 1) * GOLDEN
    return _next(&s)


def splitmix_stream(uint64_t seed, Py_ssize_t count):
    """First ``count`` outputs of the generator (used to cross-check backends)."""
    cdef uint64_t s = seed
    out = np.empty(count, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i
    for i in range(count):
        o[i] = _next(&s)
    return out


# ---------------------------------------------------------------------------
# survival split search


def logrank_best_split(
    const double[:, ::1] X,
    const int64_t[::1] rows,
    const int64_t[::1] feats,
    const double[::1] w,
    const int64_t[::1] s,
    const int64_t[::1] e,
    const int64_t[::1] ev,
    const double[::1] tailc,
    const double[::1] d,
    const double[::1] Y,
    const double[::1] gm,
    double min_events,
):
    """Best (feature, threshold) by the two-sample weighted log-rank statistic.

    Subjects are moved one at a time from the right child to the left child
    in feature order, updating the numerator and variance incrementally over
    the grid ages each subject is at risk.  Returns ``(feature, threshold,
    statistic)`` with ``feature = -1`` when no admissible split exists.
    """
    cdef Py_ssize_t m = rows.shape[0]
    cdef Py_ssize_t T = d.shape[0]
    cdef Py_ssize_t nf = feats.shape[0]
    cdef Py_ssize_t fi, k, i, pos
    cdef int64_t f, best_f = -1
    cdef double best_thr = 0.0, best_stat = 0.0
    cdef double N, D, evL, old, new, wi, ww, thr, stat, xa, xb
    cdef double E = 0.0

    rate_a = np.zeros(T)
    vf_a = np.zeros(T)
    cdef double[::1] rate = rate_a
    cdef double[::1] vf = vf_a
    for k in range(T):
        E += d[k]
        if Y[k] > 0:
            rate[k] = d[k] / Y[k]
        if Y[k] > 1.0:
            vf[k] = d[k] * (Y[k] - d[k]) / (Y[k] - 1.0) / (Y[k] * Y[k])

    yl_a = np.empty(T)
    xs_a = np.empty(m)
    cdef double[::1] YL = yl_a
    cdef double[::1] xs = xs_a
    cdef int64_t[::1] ordv

    for fi in range(nf):
        f = feats[fi]
        for i in range(m):
            xs[i] = X[rows[i], f]
        ordv = np.argsort(xs_a, kind="stable")
        with nogil:
            for k in range(T):
                YL[k] = 0.0
            N = 0.0
            D = 0.0
            evL = 0.0
            for pos in range(m - 1):
                i = ordv[pos]
                wi = w[i]
                for k in range(s[i], e[i]):
                    old = YL[k]
                    new = old + wi
                    D += vf[k] * (new * (Y[k] - new) - old * (Y[k] - old))
                    YL[k] = new
                    N -= wi * rate[k]
                if tailc[i] > 0:
                    for k in range(e[i], T):
                        ww = wi * tailc[i] * gm[k]
                        old = YL[k]
                        new = old + ww
                        D += vf[k] * (new * (Y[k] - new) - old * (Y[k] - old))
                        YL[k] = new
                        N -= ww * rate[k]
                if ev[i] >= 0:
                    N += wi
                    evL += wi
                xa = xs[i]
                xb = xs[ordv[pos + 1]]
                if not xa < xb:
                    continue
                if evL < min_events or E - evL < min_events:
                    continue
                if D <= 1e-12:
                    continue
                stat = N * N / D
                if stat > best_stat:
                    best_stat = stat
                    best_f = f
                    thr = 0.5 * (xa + xb)
                    if thr >= xb:
                        thr = xa
                    best_thr = thr
    return best_f, best_thr, best_stat


# ---------------------------------------------------------------------------
# CART regression trees (imputation)


cdef inline void _sort_keys(int64_t* a, Py_ssize_t n) noexcept nogil:
    """In-place ascending sort of distinct int64 keys (quicksort + insertion sort)."""
    cdef Py_ssize_t i, j, lo, hi
    cdef int64_t v, pivot, t
    while n > 16:
        lo = 0
        hi = n - 1
        i = n // 2
        # median of three
        if a[i] < a[lo]:
            t = a[i]; a[i] = a[lo]; a[lo] = t
        if a[hi] < a[lo]:
            t = a[hi]; a[hi] = a[lo]; a[lo] = t
        if a[hi] < a[i]:
            t = a[hi]; a[hi] = a[i]; a[i] = t
        pivot = a[i]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                t = a[i]; a[i] = a[j]; a[j] = t
                i += 1
                j -= 1
        # recurse on the smaller part, loop on the larger
        if j + 1 < n - i:
            _sort_keys(a, j + 1)
            a = a + i
            n = n - i
        else:
            _sort_keys(a + i, n - i)
            n = j + 1
    for i in range(1, n):
        v = a[i]
        j = i - 1
        while j >= 0 and a[j] > v:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = v


cdef inline Py_ssize_t fi_col(const int64_t[::1] pred_cols, Py_ssize_t q, int64_t f) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(q):
        if pred_cols[k] == f:
            return k
    return -1


cdef struct Tree:
    int64_t* feature
    double* threshold
    int64_t* left
    int64_t* right
    double* value
    Py_ssize_t n_nodes


cdef int _grow(
    const double[:, ::1] X,
    const int64_t[:, ::1] rank,
    const double[::1] y,
    const int64_t[::1] train_rows,
    const int64_t[::1] pred_cols,
    const double[::1] cum_w,
    Py_ssize_t mtry,
    double min_node,
    Py_ssize_t max_depth,
    uint64_t seed,
    Tree* tree,
) noexcept nogil:
    cdef Py_ssize_t m = train_rows.shape[0]
    cdef Py_ssize_t q = pred_cols.shape[0]
    cdef uint64_t state = seed
    cdef Py_ssize_t i, k, n_in, draw, lo, hi, mid, fi, r, tmp, top
    cdef Py_ssize_t start, end, depth, nid, nl, nr, cnt, nm
    cdef double u, W, S, S2, SSE, mean, c, yv, WL, SL, WR, SR, gain, best_gain, thr, best_thr, xa, xb
    cdef int64_t best_f, f, fr, i2
    cdef double* counts = <double*>malloc(m * sizeof(double))
    cdef int64_t* samp = <int64_t*>malloc(m * sizeof(int64_t))
    cdef int64_t* scratch = <int64_t*>malloc(m * sizeof(int64_t))
    cdef int64_t* cand = <int64_t*>malloc((q if q > 0 else 1) * sizeof(int64_t))
    cdef int64_t* keys = <int64_t*>malloc(m * sizeof(int64_t))
    cdef Py_ssize_t* st_start = <Py_ssize_t*>malloc((2 * m + 2) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* st_end = <Py_ssize_t*>malloc((2 * m + 2) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* st_depth = <Py_ssize_t*>malloc((2 * m + 2) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* st_id = <Py_ssize_t*>malloc((2 * m + 2) * sizeof(Py_ssize_t))

    for i in range(m):
        counts[i] = 0.0
    for draw in range(m):
        if cum_w.shape[0] > 0:
            u = _next_double(&state) * cum_w[m - 1]
            lo = 0
            hi = m - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cum_w[mid] > u:
                    hi = mid
                else:
                    lo = mid + 1
            counts[lo] += 1.0
        else:
            counts[_next(&state) % <uint64_t>m] += 1.0
    n_in = 0
    for i in range(m):
        if counts[i] > 0:
            samp[n_in] = i
            n_in += 1

    tree.n_nodes = 1
    top = 0
    st_start[0] = 0
    st_end[0] = n_in
    st_depth[0] = 0
    st_id[0] = 0
    while top >= 0:
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        nid = st_id[top]
        top -= 1

        W = 0.0
        S = 0.0
        S2 = 0.0
        for k in range(start, end):
            i = samp[k]
            c = counts[i]
            yv = y[train_rows[i]]
            W += c
            S += c * yv
            S2 += c * yv * yv
        mean = S / W
        SSE = 0.0
        for k in range(start, end):
            i = samp[k]
            yv = y[train_rows[i]] - mean
            SSE += counts[i] * yv * yv
        tree.feature[nid] = -1
        tree.threshold[nid] = 0.0
        tree.left[nid] = -1
        tree.right[nid] = -1
        tree.value[nid] = mean
        if (max_depth >= 0 and depth >= max_depth) or W < 2.0 * min_node or SSE <= 1e-12 * S2:
            continue

        for k in range(q):
            cand[k] = pred_cols[k]
        nm = mtry if mtry < q else q
        best_gain = 1e-10 * SSE
        best_f = -1
        best_thr = 0.0
        cnt = end - start
        for fi in range(nm):
            r = fi + <Py_ssize_t>(_next(&state) % <uint64_t>(q - fi))
            tmp = cand[fi]
            cand[fi] = cand[r]
            cand[r] = tmp
            f = cand[fi]
            fr = fi_col(pred_cols, q, f)
            # keys order rows by (value, local index); ranks share ties
            for k in range(cnt):
                i = samp[start + k]
                keys[k] = rank[i, fr] * m + i
            _sort_keys(keys, cnt)
            WL = 0.0
            SL = 0.0
            for k in range(cnt - 1):
                i = keys[k] % m
                i2 = keys[k + 1] % m
                c = counts[i]
                WL += c
                SL += c * y[train_rows[i]]
                if not keys[k] // m < keys[k + 1] // m:
                    continue
                WR = W - WL
                if WL < min_node or WR < min_node:
                    continue
                SR = S - SL
                gain = SL * SL / WL + SR * SR / WR - S * S / W
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    xa = X[train_rows[i], f]
                    xb = X[train_rows[i2], f]
                    thr = 0.5 * (xa + xb)
                    if thr >= xb:
                        thr = xa
                    best_thr = thr
        if best_f < 0:
            continue

        nl = 0
        nr = 0
        for k in range(start, end):
            i = samp[k]
            if X[train_rows[i], best_f] <= best_thr:
                samp[start + nl] = i
                nl += 1
            else:
                scratch[nr] = i
                nr += 1
        for k in range(nr):
            samp[start + nl + k] = scratch[k]

        tree.feature[nid] = best_f
        tree.threshold[nid] = best_thr
        tree.left[nid] = tree.n_nodes
        tree.right[nid] = tree.n_nodes + 1
        tree.n_nodes += 2
        top += 1
        st_start[top] = start + nl
        st_end[top] = end
        st_depth[top] = depth + 1
        st_id[top] = tree.right[nid]
        top += 1
        st_start[top] = start
        st_end[top] = start + nl
        st_depth[top] = depth + 1
        st_id[top] = tree.left[nid]

    free(counts)
    free(samp)
    free(scratch)
    free(cand)
    free(keys)
    free(st_start)
    free(st_end)
    free(st_depth)
    free(st_id)
    return 0


def _ranks(X, train_rows, pred_cols):
    """Dense ranks of training values per predictor (ties share a rank)."""
    sub = np.asarray(X)[np.asarray(train_rows)][:, np.asarray(pred_cols)]
    out = np.empty(sub.shape, dtype=np.int64)
    for k in range(sub.shape[1]):
        out[:, k] = np.unique(sub[:, k], return_inverse=True)[1].ravel()
    return np.ascontiguousarray(out)


def cart_grow_tree(
    const double[:, ::1] X,
    const double[::1] y,
    const int64_t[::1] train_rows,
    const int64_t[::1] pred_cols,
    const double[::1] cum_w,
    Py_ssize_t mtry,
    double min_node,
    Py_ssize_t max_depth,
    uint64_t seed,
):
    """Grow one bootstrap regression tree; returns flat node arrays."""
    cdef Py_ssize_t cap = 2 * train_rows.shape[0] + 1
    feature = np.empty(cap, dtype=np.int64)
    threshold = np.empty(cap)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    value = np.empty(cap)
    cdef int64_t[::1] fv = feature
    cdef double[::1] tv = threshold
    cdef int64_t[::1] lv = left
    cdef int64_t[::1] rv = right
    cdef double[::1] vv = value
    cdef Tree tree
    tree.feature = &fv[0]
    tree.threshold = &tv[0]
    tree.left = &lv[0]
    tree.right = &rv[0]
    tree.value = &vv[0]
    cdef int64_t[:, ::1] rank = _ranks(X, train_rows, pred_cols)
    with nogil:
        _grow(X, rank, y, train_rows, pred_cols, cum_w, mtry, min_node, max_depth, seed, &tree)
    n = tree.n_nodes
    return feature[:n].copy(), threshold[:n].copy(), left[:n].copy(), right[:n].copy(), value[:n].copy()


def cart_forest_predict(
    const double[:, ::1] X,
    const double[::1] y,
    const int64_t[::1] train_rows,
    const int64_t[::1] query_rows,
    const int64_t[::1] pred_cols,
    const double[::1] cum_w,
    Py_ssize_t mtry,
    double min_node,
    Py_ssize_t max_depth,
    uint64_t base_seed,
    Py_ssize_t tree_start,
    Py_ssize_t tree_end,
):
    """Per-tree predictions for ``query_rows``; shape (tree_end - tree_start, n_query)."""
    cdef Py_ssize_t cap = 2 * train_rows.shape[0] + 1
    cdef Py_ssize_t nq = query_rows.shape[0]
    cdef Py_ssize_t t, qi, node
    cdef uint64_t sd
    out = np.empty((tree_end - tree_start, nq))
    cdef double[:, ::1] ov = out
    cdef Tree tree
    tree.feature = <int64_t*>malloc(cap * sizeof(int64_t))
    tree.threshold = <double*>malloc(cap * sizeof(double))
    tree.left = <int64_t*>malloc(cap * sizeof(int64_t))
    tree.right = <int64_t*>malloc(cap * sizeof(int64_t))
    tree.value = <double*>malloc(cap * sizeof(double))
    cdef int64_t[:, ::1] rank = _ranks(X, train_rows, pred_cols)
    with nogil:
        for t in range(tree_start, tree_end):
            sd = base_seed + <uint64_t>(t + 1) * GOLDEN
            sd = _next(&sd)
            _grow(X, rank, y, train_rows, pred_cols, cum_w, mtry, min_node, max_depth, sd, &tree)
            for qi in range(nq):
                node = 0
                while tree.feature[node] >= 0:
                    if X[query_rows[qi], tree.feature[node]] <= tree.threshold[node]:
                        node = tree.left[node]
                    else:
                        node = tree.right[node]
                ov[t - tree_start, qi] = tree.value[node]
    free(tree.feature)
    free(tree.threshold)
    free(tree.left)
    free(tree.right)
    free(tree.value)
    return out


# ---------------------------------------------------------------------------
# prediction


def apply_tree(
    const int64_t[::1] feature,
    const double[::1] threshold,
    const int64_t[::1] left,
    const int64_t[::1] right,
    const double[:, ::1] X,
    const int64_t[::1] rows,
):
    """Terminal node index reached by each of ``rows``."""
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t i, node
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] ov = out
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[rows[i], feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            ov[i] = node
    return out
