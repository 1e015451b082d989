"""Numpy implementations of the tree kernels.

Same signatures and semantics as the compiled ``_kernels`` module.  The CART
builder replays the identical splitmix64 stream and accumulates sums in the
same order (``np.cumsum`` is sequential), so trees match the compiled ones.
"""
import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class _SplitMix:
    __slots__ = ("state",)

    def __init__(self, seed):
        self.state = int(seed) & MASK

    def next(self):
        self.state = (self.state + GOLDEN) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def next_double(self):
        return (self.next() >> 11) * (1.0 / 9007199254740992.0)


def tree_seed(base, tree_index):
    s = (int(base) + (int(tree_index) + 1) * GOLDEN) & MASK
    return _SplitMix(s).next()


def splitmix_stream(seed, count):
    g = _SplitMix(seed)
    return np.array([g.next() for _ in range(count)], dtype=np.uint64)


def _seq_sum(a):
    return float(np.cumsum(a)[-1]) if a.size else 0.0


def logrank_best_split(X, rows, feats, w, s, e, ev, tailc, d, Y, gm, min_events):
    m = rows.shape[0]
    T = d.shape[0]
    E = _seq_sum(d)
    rate = np.zeros(T)
    pos = Y > 0
    rate[pos] = d[pos] / Y[pos]
    vf = np.zeros(T)
    big = Y > 1.0
    vf[big] = d[big] * (Y[big] - d[big]) / (Y[big] - 1.0) / (Y[big] * Y[big])

    k = np.arange(T)
    A = ((s[:, None] <= k) & (k < e[:, None])) * w[:, None]
    tails = tailc > 0
    if tails.any():
        A[tails] += (k >= e[tails, None]) * (w[tails] * tailc[tails])[:, None] * gm[None, :]
    evw = np.where(ev >= 0, w, 0.0)

    best_f, best_thr, best_stat = -1, 0.0, 0.0
    for f in feats:
        xs = X[rows, f]
        order = np.argsort(xs, kind="stable")
        YL = np.cumsum(A[order], axis=0)[:-1]
        evL = np.cumsum(evw[order])[:-1]
        N = evL - YL @ rate
        D = (YL * (Y - YL)) @ vf
        xo = xs[order]
        ok = (xo[:-1] < xo[1:]) & (evL >= min_events) & (E - evL >= min_events) & (D > 1e-12)
        if not ok.any():
            continue
        stat = np.where(ok, N * N / np.where(ok, D, 1.0), -np.inf)
        j = int(np.argmax(stat))
        if stat[j] > best_stat:
            best_stat = float(stat[j])
            best_f = int(f)
            a, b = xo[j], xo[j + 1]
            thr = 0.5 * (a + b)
            best_thr = float(a if thr >= b else thr)
    return best_f, best_thr, best_stat


def _grow(X, y, train_rows, pred_cols, cum_w, mtry, min_node, max_depth, seed):
    m = train_rows.shape[0]
    q = pred_cols.shape[0]
    rng = _SplitMix(seed)
    counts = np.zeros(m)
    if cum_w.shape[0] > 0:
        total = cum_w[m - 1]
        for _ in range(m):
            u = rng.next_double() * total
            counts[min(int(np.searchsorted(cum_w, u, side="right")), m - 1)] += 1.0
    else:
        for _ in range(m):
            counts[rng.next() % m] += 1.0
    samp = np.flatnonzero(counts > 0)
    yy = y[train_rows]

    feature, threshold, left, right, value = [0], [0.0], [-1], [-1], [0.0]
    stack = [(0, samp.shape[0], 0, 0)]
    while stack:
        start, end, depth, nid = stack.pop()
        idx = samp[start:end]
        c = counts[idx]
        yv = yy[idx]
        W = _seq_sum(c)
        S = _seq_sum(c * yv)
        S2 = _seq_sum(c * yv * yv)
        mean = S / W
        SSE = _seq_sum(c * (yv - mean) * (yv - mean))
        feature[nid], threshold[nid], left[nid], right[nid], value[nid] = -1, 0.0, -1, -1, mean
        if (max_depth >= 0 and depth >= max_depth) or W < 2.0 * min_node or SSE <= 1e-12 * S2:
            continue
        cand = [int(v) for v in pred_cols]
        best_gain, best_f, best_thr = 1e-10 * SSE, -1, 0.0
        for fi in range(min(mtry, q)):
            r = fi + rng.next() % (q - fi)
            cand[fi], cand[r] = cand[r], cand[fi]
            f = cand[fi]
            xs = X[train_rows[idx], f]
            order = np.lexsort((idx, xs))
            xo = xs[order]
            co = c[order]
            WL = np.cumsum(co)[:-1]
            SL = np.cumsum(co * yv[order])[:-1]
            WR = W - WL
            SR = S - SL
            ok = (xo[:-1] < xo[1:]) & (WL >= min_node) & (WR >= min_node)
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = SL * SL / WL + SR * SR / WR - S * S / W
            gain = np.where(ok, gain, -np.inf)
            j = int(np.argmax(gain))
            if gain[j] > best_gain:
                best_gain, best_f = gain[j], f
                a, b = xo[j], xo[j + 1]
                thr = 0.5 * (a + b)
                best_thr = float(a if thr >= b else thr)
        if best_f < 0:
            continue
        goes_left = X[train_rows[idx], best_f] <= best_thr
        samp[start:end] = np.concatenate((idx[goes_left], idx[~goes_left]))
        nl = int(goes_left.sum())
        lid = len(feature)
        feature += [0, 0]
        threshold += [0.0, 0.0]
        left += [-1, -1]
        right += [-1, -1]
        value += [0.0, 0.0]
        feature[nid], threshold[nid], left[nid], right[nid] = best_f, best_thr, lid, lid + 1
        stack.append((start + nl, end, depth + 1, lid + 1))
        stack.append((start, start + nl, depth + 1, lid))
    return (
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=float),
    )


def cart_grow_tree(X, y, train_rows, pred_cols, cum_w, mtry, min_node, max_depth, seed):
    return _grow(X, y, train_rows, pred_cols, cum_w, mtry, min_node, max_depth, seed)


def cart_forest_predict(
    X, y, train_rows, query_rows, pred_cols, cum_w, mtry, min_node, max_depth, base_seed, tree_start, tree_end
):
    out = np.empty((tree_end - tree_start, query_rows.shape[0]))
    for t in range(tree_start, tree_end):
        feature, threshold, left, right, value = _grow(
            X, y, train_rows, pred_cols, cum_w, mtry, min_node, max_depth, tree_seed(base_seed, t)
        )
        out[t - tree_start] = value[apply_tree(feature, threshold, left, right, X, query_rows)]
    return out


def apply_tree(feature, threshold, left, right, X, rows):
    node = np.zeros(rows.shape[0], dtype=np.int64)
    active = np.flatnonzero(feature[node] >= 0)
    while active.size:
        nd = node[active]
        go_left = X[rows[active], feature[nd]] <= threshold[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
        active = active[feature[node[active]] >= 0]
    return node
