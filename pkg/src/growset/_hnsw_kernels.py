"""Compiled graph kernels for :mod:`growset.ann`.

All ordering is lexicographic on ``(distance, node id)`` so that results are
deterministic under ties. Graph traversal ranks by ``1 - dot`` on the stored
unit vectors; final query results are re-ranked with the exact cosine
(``dot`` divided by float64 norms) so duplicates land at distance ~1e-16.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _less(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


@njit(cache=True)
def exact_dist(vecs, inv, q, qinv, j):
    s = 0.0
    for t in range(q.shape[0]):
        s += q[t] * vecs[j, t]
    return 1.0 - s * qinv * inv[j]


@njit(cache=True)
def dist_to_query(vecs, inv, q, qinv, j):
    s = 0.0
    for t in range(q.shape[0]):
        s += q[t] * vecs[j, t]
    return 1.0 - s


@njit(cache=True)
def dist_nodes(vecs, inv, a, b):
    s = 0.0
    for t in range(vecs.shape[1]):
        s += np.float64(vecs[a, t]) * np.float64(vecs[b, t])
    return 1.0 - s


@njit(cache=True, inline="always")
def _row(upper_off, j, lc):
    return upper_off[j] + lc - 1


@njit(cache=True)
def _heap_push(hd, hi, size, d, i):
    pos = size
    hd[pos] = d
    hi[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(hd[pos], hi[pos], hd[parent], hi[parent]):
            hd[pos], hd[parent] = hd[parent], hd[pos]
            hi[pos], hi[parent] = hi[parent], hi[pos]
            pos = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(hd, hi, size):
    size -= 1
    hd[0] = hd[size]
    hi[0] = hi[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and _less(hd[right], hi[right], hd[left], hi[left]):
            best = right
        if _less(hd[best], hi[best], hd[pos], hi[pos]):
            hd[pos], hd[best] = hd[best], hd[pos]
            hi[pos], hi[best] = hi[best], hi[pos]
            pos = best
        else:
            break
    return size


@njit(cache=True)
def _sorted_insert(wd, wi, wn, cap, d, i):
    """Insert into an ascending buffer holding ``wn`` items, keeping at most ``cap``."""
    pos = wn if wn < cap else cap - 1
    while pos > 0 and _less(d, i, wd[pos - 1], wi[pos - 1]):
        if pos < cap:
            wd[pos] = wd[pos - 1]
            wi[pos] = wi[pos - 1]
        pos -= 1
    wd[pos] = d
    wi[pos] = i
    return wn + 1 if wn < cap else cap


@njit(cache=True)
def search_layer(q, qinv, ep_d, ep_i, n_ep, ef, lc, vecs, inv, nbr0, cnt0,
                 upper_off, nbru, cntu, n_nodes, visited, tag):
    wd = np.empty(ef, dtype=np.float64)
    wi = np.empty(ef, dtype=np.int64)
    wn = 0
    heap_cap = 2 * ef + n_ep + 16
    hd = np.empty(heap_cap, dtype=np.float64)
    hi = np.empty(heap_cap, dtype=np.int64)
    hn = 0
    for t in range(n_ep):
        e = ep_i[t]
        if visited[e] == tag:
            continue
        visited[e] = tag
        hn = _heap_push(hd, hi, hn, ep_d[t], e)
        if wn < ef or _less(ep_d[t], e, wd[wn - 1], wi[wn - 1]):
            wn = _sorted_insert(wd, wi, wn, ef, ep_d[t], e)
    while hn > 0:
        cd = hd[0]
        ci = hi[0]
        hn = _heap_pop(hd, hi, hn)
        if wn == ef and _less(wd[wn - 1], wi[wn - 1], cd, ci):
            break
        if lc == 0:
            deg = cnt0[ci]
        else:
            deg = cntu[_row(upper_off, ci, lc)]
        for s in range(deg):
            if lc == 0:
                e = nbr0[ci, s]
            else:
                e = nbru[_row(upper_off, ci, lc), s]
            if visited[e] == tag:
                continue
            visited[e] = tag
            d = dist_to_query(vecs, inv, q, qinv, e)
            if wn < ef or _less(d, e, wd[wn - 1], wi[wn - 1]):
                if hn == heap_cap:
                    heap_cap *= 2
                    hd2 = np.empty(heap_cap, dtype=np.float64)
                    hi2 = np.empty(heap_cap, dtype=np.int64)
                    hd2[:hn] = hd[:hn]
                    hi2[:hn] = hi[:hn]
                    hd = hd2
                    hi = hi2
                hn = _heap_push(hd, hi, hn, d, e)
                wn = _sorted_insert(wd, wi, wn, ef, d, e)
    return wd[:wn].copy(), wi[:wn].copy()


@njit(cache=True)
def select_heuristic(cand_d, cand_i, m, vecs, inv):
    """Diversity heuristic with pruned-candidate fill; input sorted ascending."""
    n = cand_i.shape[0]
    out = np.empty(min(m, n), dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    k = 0
    for a in range(n):
        if k >= m:
            break
        good = True
        for b in range(k):
            if dist_nodes(vecs, inv, cand_i[a], out[b]) < cand_d[a]:
                good = False
                break
        if good:
            out[k] = cand_i[a]
            taken[a] = True
            k += 1
    for a in range(n):
        if k >= m:
            break
        if not taken[a]:
            out[k] = cand_i[a]
            k += 1
    return out[:k]


@njit(cache=True)
def _remove_link(nbr0, cnt0, upper_off, nbru, cntu, node, lc, target):
    if lc == 0:
        c = cnt0[node]
        for s in range(c):
            if nbr0[node, s] == target:
                for t in range(s, c - 1):
                    nbr0[node, t] = nbr0[node, t + 1]
                cnt0[node] = c - 1
                return
    else:
        r = _row(upper_off, node, lc)
        c = cntu[r]
        for s in range(c):
            if nbru[r, s] == target:
                for t in range(s, c - 1):
                    nbru[r, t] = nbru[r, t + 1]
                cntu[r] = c - 1
                return


@njit(cache=True)
def _sort_pairs(d, i):
    order = np.argsort(d, kind="mergesort")
    d2 = d[order]
    i2 = i[order]
    # mergesort is stable; resolve equal distances by id
    n = d2.shape[0]
    for a in range(1, n):
        b = a
        while b > 0 and d2[b] == d2[b - 1] and i2[b] < i2[b - 1]:
            i2[b], i2[b - 1] = i2[b - 1], i2[b]
            b -= 1
    return d2, i2


@njit(cache=True)
def _add_reverse(e, q, lc, m_cap, vecs, inv, nbr0, cnt0, upper_off, nbru, cntu):
    """Link q into e's list at level lc; returns the node dropped from e (or -1)."""
    if lc == 0:
        c = cnt0[e]
    else:
        c = cntu[_row(upper_off, e, lc)]
    if c < m_cap:
        if lc == 0:
            nbr0[e, c] = q
            cnt0[e] = c + 1
        else:
            r = _row(upper_off, e, lc)
            nbru[r, c] = q
            cntu[r] = c + 1
        return -1
    cd = np.empty(c + 1, dtype=np.float64)
    ci = np.empty(c + 1, dtype=np.int64)
    for s in range(c):
        if lc == 0:
            j = nbr0[e, s]
        else:
            j = nbru[_row(upper_off, e, lc), s]
        ci[s] = j
        cd[s] = dist_nodes(vecs, inv, e, j)
    ci[c] = q
    cd[c] = dist_nodes(vecs, inv, e, q)
    cd, ci = _sort_pairs(cd, ci)
    keep = select_heuristic(cd, ci, m_cap, vecs, inv)
    dropped = -1
    for s in range(c + 1):
        found = False
        for t in range(keep.shape[0]):
            if keep[t] == ci[s]:
                found = True
                break
        if not found:
            dropped = ci[s]
            break
    for t in range(keep.shape[0]):
        if lc == 0:
            nbr0[e, t] = keep[t]
        else:
            nbru[_row(upper_off, e, lc), t] = keep[t]
    if lc == 0:
        cnt0[e] = keep.shape[0]
    else:
        cntu[_row(upper_off, e, lc)] = keep.shape[0]
    return dropped


@njit(cache=True)
def insert_node(qid, level, entry, max_level, m, m0, ef_c, vecs, inv, levels,
                nbr0, cnt0, upper_off, nbru, cntu, visited, tag_box):
    """Wire node ``qid`` (vector already stored) into the graph.

    Returns the new ``(entry, max_level)``. ``tag_box[0]`` is the visited-tag
    counter; the caller guarantees it will not overflow during this call.
    """
    n_nodes = qid + 1
    if entry < 0:
        return qid, level
    q = vecs[qid].astype(np.float64)
    qinv = inv[qid]
    ep_d = np.empty(1, dtype=np.float64)
    ep_i = np.empty(1, dtype=np.int64)
    ep_i[0] = entry
    ep_d[0] = dist_to_query(vecs, inv, q, qinv, entry)
    lc = max_level
    while lc > level:
        tag_box[0] += 1
        wd, wi = search_layer(q, qinv, ep_d, ep_i, 1, 1, lc, vecs, inv, nbr0, cnt0,
                              upper_off, nbru, cntu, n_nodes, visited, tag_box[0])
        ep_d = wd
        ep_i = wi
        lc -= 1
    lc = min(level, max_level)
    while lc >= 0:
        tag_box[0] += 1
        wd, wi = search_layer(q, qinv, ep_d, ep_i, ep_i.shape[0], ef_c, lc, vecs, inv,
                              nbr0, cnt0, upper_off, nbru, cntu, n_nodes, visited, tag_box[0])
        chosen = select_heuristic(wd, wi, m, vecs, inv)
        m_cap = m0 if lc == 0 else m
        for t in range(chosen.shape[0]):
            if lc == 0:
                nbr0[qid, t] = chosen[t]
            else:
                nbru[_row(upper_off, qid, lc), t] = chosen[t]
        if lc == 0:
            cnt0[qid] = chosen.shape[0]
        else:
            cntu[_row(upper_off, qid, lc)] = chosen.shape[0]
        for t in range(chosen.shape[0]):
            e = chosen[t]
            dropped = _add_reverse(e, qid, lc, m_cap, vecs, inv, nbr0, cnt0, upper_off, nbru, cntu)
            if dropped >= 0:
                # keep adjacency symmetric: the pruned node forgets e as well
                _remove_link(nbr0, cnt0, upper_off, nbru, cntu, dropped, lc, e)
        ep_d = wd
        ep_i = wi
        lc -= 1
    if level > max_level:
        return qid, level
    return entry, max_level


@njit(cache=True)
def query_graph(q, qinv, k, ef, entry, max_level, vecs, inv, nbr0, cnt0,
                upper_off, nbru, cntu, n_nodes, visited, tag_box):
    ep_d = np.empty(1, dtype=np.float64)
    ep_i = np.empty(1, dtype=np.int64)
    ep_i[0] = entry
    ep_d[0] = dist_to_query(vecs, inv, q, qinv, entry)
    lc = max_level
    while lc > 0:
        tag_box[0] += 1
        ep_d, ep_i = search_layer(q, qinv, ep_d, ep_i, 1, 1, lc, vecs, inv, nbr0, cnt0,
                                  upper_off, nbru, cntu, n_nodes, visited, tag_box[0])
        lc -= 1
    tag_box[0] += 1
    wd, wi = search_layer(q, qinv, ep_d, ep_i, 1, ef, 0, vecs, inv, nbr0, cnt0,
                          upper_off, nbru, cntu, n_nodes, visited, tag_box[0])
    for t in range(wi.shape[0]):
        wd[t] = exact_dist(vecs, inv, q, qinv, wi[t])
    wd, wi = _sort_pairs(wd, wi)
    kk = min(k, wd.shape[0])
    return wd[:kk].copy(), wi[:kk].copy()


@njit(cache=True)
def brute_force(vecs, inv, q, qinv, n):
    out = np.empty(n, dtype=np.float64)
    for j in range(n):
        out[j] = exact_dist(vecs, inv, q, qinv, j)
    return out
