# distutils: language = c++
# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled HNSW graph construction/search and Hamming popcount kernels.

The pure-Python twin lives in ``_kernels_py``; both expose the same three
functions and must agree on graph layout.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t
from libcpp.vector cimport vector
from libcpp.queue cimport priority_queue
from libcpp.utility cimport pair
from libcpp.algorithm cimport sort

cnp.import_array()

ctypedef pair[float, int] dist_id


cdef extern from *:
    """
    static inline int vpg_popcount64(unsigned long long x) { return __builtin_popcountll(x); }
    static inline void vpg_prefetch(const void* p) { __builtin_prefetch(p, 0, 3); }
    """
    int vpg_popcount64(unsigned long long x) nogil
    void vpg_prefetch(const void* p) nogil


cdef inline float l2sq(const float* a, const float* b, int d) noexcept nogil:
    cdef float s0 = 0, s1 = 0, s2 = 0, s3 = 0, t0, t1, t2, t3
    cdef int i = 0
    while i + 4 <= d:
        t0 = a[i] - b[i]
        t1 = a[i + 1] - b[i + 1]
        t2 = a[i + 2] - b[i + 2]
        t3 = a[i + 3] - b[i + 3]
        s0 += t0 * t0
        s1 += t1 * t1
        s2 += t2 * t2
        s3 += t3 * t3
        i += 4
    while i < d:
        t0 = a[i] - b[i]
        s0 += t0 * t0
        i += 1
    return (s0 + s1) + (s2 + s3)


cdef struct Graph:
    const float* data
    int n
    int d
    int cap
    int* links      # [levels][n][cap]
    int* counts     # [levels][n]
    unsigned int* visited
    unsigned int epoch


cdef inline int* node_links(Graph* g, int layer, int node) noexcept nogil:
    return g.links + (<int64_t>layer * g.n + node) * g.cap


cdef inline int* node_count(Graph* g, int layer, int node) noexcept nogil:
    return g.counts + <int64_t>layer * g.n + node


cdef void search_layer(Graph* g, const float* q, vector[dist_id]& eps, int ef,
                       int layer, vector[dist_id]& out) noexcept nogil:
    """Best-first beam search on one layer; ``out`` is ascending (dist, id)."""
    cdef priority_queue[dist_id] cand   # (-dist, -id): top is nearest
    cdef priority_queue[dist_id] res    # (dist, id): top is farthest
    cdef dist_id cur
    cdef float cd, dd
    cdef int node, nb, j, cnt
    cdef int* nbrs
    g.epoch += 1
    if g.epoch == 0:
        for j in range(g.n):
            g.visited[j] = 0
        g.epoch = 1
    for j in range(<int>eps.size()):
        node = eps[j].second
        if g.visited[node] == g.epoch:
            continue
        g.visited[node] = g.epoch
        cand.push(dist_id(-eps[j].first, -node))
        res.push(dist_id(eps[j].first, node))
        if <int>res.size() > ef:
            res.pop()
    while not cand.empty():
        cur = cand.top()
        cd = -cur.first
        if <int>res.size() >= ef and cd > res.top().first:
            break
        cand.pop()
        node = -cur.second
        nbrs = node_links(g, layer, node)
        cnt = node_count(g, layer, node)[0]
        for j in range(cnt):
            vpg_prefetch(&g.visited[nbrs[j]])
        for j in range(cnt):
            nb = nbrs[j]
            if j + 1 < cnt:
                vpg_prefetch(g.data + <int64_t>nbrs[j + 1] * g.d)
            if g.visited[nb] == g.epoch:
                continue
            g.visited[nb] = g.epoch
            dd = l2sq(q, g.data + <int64_t>nb * g.d, g.d)
            if <int>res.size() < ef or dd < res.top().first:
                cand.push(dist_id(-dd, -nb))
                res.push(dist_id(dd, nb))
                if <int>res.size() > ef:
                    res.pop()
    out.clear()
    while not res.empty():
        out.push_back(res.top())
        res.pop()
    sort(out.begin(), out.end())


cdef void select_neighbors(Graph* g, vector[dist_id]& cands, int limit, bint keep_pruned,
                           vector[int]& chosen) noexcept nogil:
    """Diversity heuristic over ascending candidates, optionally back-filled."""
    cdef vector[int] pruned
    cdef int i, j, e
    cdef bint good
    cdef float dq
    chosen.clear()
    for i in range(<int>cands.size()):
        if <int>chosen.size() >= limit:
            break
        e = cands[i].second
        dq = cands[i].first
        good = True
        for j in range(<int>chosen.size()):
            if l2sq(g.data + <int64_t>e * g.d, g.data + <int64_t>chosen[j] * g.d, g.d) < dq:
                good = False
                break
        if good:
            chosen.push_back(e)
        else:
            pruned.push_back(e)
    if keep_pruned:
        i = 0
        while <int>chosen.size() < limit and i < <int>pruned.size():
            chosen.push_back(pruned[i])
            i += 1


cdef void connect(Graph* g, int node, int layer, int limit, vector[int]& chosen,
                  bint keep_pruned) noexcept nogil:
    cdef int i, j, nb, cnt
    cdef int* lst
    cdef vector[dist_id] tmp
    cdef vector[int] kept
    cdef const float* base
    lst = node_links(g, layer, node)
    for i in range(<int>chosen.size()):
        lst[i] = chosen[i]
    node_count(g, layer, node)[0] = <int>chosen.size()
    for i in range(<int>chosen.size()):
        nb = chosen[i]
        lst = node_links(g, layer, nb)
        cnt = node_count(g, layer, nb)[0]
        if cnt < limit:
            lst[cnt] = node
            node_count(g, layer, nb)[0] = cnt + 1
            continue
        base = g.data + <int64_t>nb * g.d
        tmp.clear()
        tmp.push_back(dist_id(l2sq(base, g.data + <int64_t>node * g.d, g.d), node))
        for j in range(cnt):
            tmp.push_back(dist_id(l2sq(base, g.data + <int64_t>lst[j] * g.d, g.d), lst[j]))
        sort(tmp.begin(), tmp.end())
        select_neighbors(g, tmp, limit, keep_pruned, kept)
        for j in range(<int>kept.size()):
            lst[j] = kept[j]
        node_count(g, layer, nb)[0] = <int>kept.size()


def hnsw_build(const float[:, ::1] data, const int[::1] levels, int M, int ef_construction,
               bint keep_pruned=True):
    """Insert rows of ``data`` in order; returns (links, counts, entry, max_level)."""
    cdef int n = data.shape[0]
    cdef int d = data.shape[1]
    cdef int max_level = 0
    cdef int i, layer, top, entry = -1, cur_top = -1, limit
    if n > 0:
        max_level = int(np.max(levels))
    cdef int cap = 2 * M
    links_arr = np.full((max_level + 1, n, cap), -1, dtype=np.int32)
    counts_arr = np.zeros((max_level + 1, n), dtype=np.int32)
    visited_arr = np.zeros(max(n, 1), dtype=np.uint32)
    cdef int[:, :, ::1] links = links_arr
    cdef int[:, ::1] counts = counts_arr
    cdef unsigned int[::1] visited = visited_arr
    if n == 0:
        return links_arr, counts_arr, -1, 0
    cdef Graph g
    g.data = &data[0, 0]
    g.n = n
    g.d = d
    g.cap = cap
    g.links = &links[0, 0, 0]
    g.counts = &counts[0, 0]
    g.visited = &visited[0]
    g.epoch = 0
    cdef vector[dist_id] eps
    cdef vector[dist_id] found
    cdef vector[int] chosen
    cdef const float* q
    with nogil:
        for i in range(n):
            top = levels[i]
            if entry < 0:
                entry = i
                cur_top = top
                continue
            q = g.data + <int64_t>i * d
            eps.clear()
            eps.push_back(dist_id(l2sq(q, g.data + <int64_t>entry * d, d), entry))
            layer = cur_top
            while layer > top:
                search_layer(&g, q, eps, 1, layer, found)
                eps.clear()
                eps.push_back(found[0])
                layer -= 1
            layer = top if top < cur_top else cur_top
            while layer >= 0:
                search_layer(&g, q, eps, ef_construction, layer, found)
                limit = cap if layer == 0 else M
                select_neighbors(&g, found, M, keep_pruned, chosen)
                connect(&g, i, layer, limit, chosen, keep_pruned)
                eps = found
                layer -= 1
            if top > cur_top:
                cur_top = top
                entry = i
    return links_arr, counts_arr, entry, cur_top


def hnsw_search(const float[:, ::1] data, const int[:, :, ::1] links, const int[:, ::1] counts,
                int entry, int max_level, const float[:, ::1] queries, int k, int ef):
    """Batched k-NN; returns (ids int64 [m, k] padded with -1, dists float32 [m, k])."""
    cdef int n = data.shape[0]
    cdef int d = data.shape[1]
    cdef int m = queries.shape[0]
    ids_arr = np.full((m, k), -1, dtype=np.int64)
    dists_arr = np.full((m, k), np.inf, dtype=np.float32)
    if n == 0 or m == 0 or k <= 0:
        return ids_arr, dists_arr
    if queries.shape[1] != d:
        raise ValueError("query dimension does not match index")
    cdef int64_t[:, ::1] ids = ids_arr
    cdef float[:, ::1] dists = dists_arr
    visited_arr = np.zeros(n, dtype=np.uint32)
    cdef unsigned int[::1] visited = visited_arr
    cdef Graph g
    g.data = &data[0, 0]
    g.n = n
    g.d = d
    g.cap = links.shape[2]
    g.links = <int*>&links[0, 0, 0]
    g.counts = <int*>&counts[0, 0]
    g.visited = &visited[0]
    g.epoch = 0
    cdef vector[dist_id] eps
    cdef vector[dist_id] found
    cdef int qi, layer, j, width
    cdef const float* q
    width = ef if ef > k else k
    with nogil:
        for qi in range(m):
            q = &queries[qi, 0]
            eps.clear()
            eps.push_back(dist_id(l2sq(q, g.data + <int64_t>entry * d, d), entry))
            layer = max_level
            while layer > 0:
                search_layer(&g, q, eps, 1, layer, found)
                eps.clear()
                eps.push_back(found[0])
                layer -= 1
            search_layer(&g, q, eps, width, 0, found)
            for j in range(<int>found.size()):
                if j >= k:
                    break
                ids[qi, j] = found[j].second
                dists[qi, j] = found[j].first
    return ids_arr, np.sqrt(dists_arr)


def hamming_many(const uint64_t[::1] code, const uint64_t[:, ::1] codes):
    """Bit distance from ``code`` to every row of ``codes``."""
    cdef int n = codes.shape[0]
    cdef int w = codes.shape[1]
    out_arr = np.zeros(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef int i, j, s
    if code.shape[0] != w:
        raise ValueError("code width mismatch")
    with nogil:
        for i in range(n):
            s = 0
            for j in range(w):
                s += vpg_popcount64(code[j] ^ codes[i, j])
            out[i] = s
    return out_arr
