"""Pure-Python HNSW and Hamming kernels.

Mirrors ``_kernels.pyx`` step for step (same heaps, same tie rules, same
array layout) so that indexes built by either backend are interchangeable.
Distances are float32 throughout; summation order differs from the compiled
path, so graphs can diverge on near-ties.
"""

from __future__ import annotations

import heapq

import numpy as np


def _l2sq(a: np.ndarray, b: np.ndarray) -> float:
    t = a - b
    return float(np.dot(t, t))


class _Graph:
    def __init__(self, data, links, counts):
        self.data = data
        self.links = links
        self.counts = counts
        self.visited = np.zeros(max(data.shape[0], 1), dtype=np.uint32)
        self.epoch = 0

    def search_layer(self, q, eps, ef, layer):
        self.epoch += 1
        visited, epoch = self.visited, self.epoch
        cand: list[tuple[float, int]] = []
        res: list[tuple[float, int]] = []  # (-dist, -id): res[0] is farthest
        for dist, node in eps:
            if visited[node] == epoch:
                continue
            visited[node] = epoch
            heapq.heappush(cand, (dist, node))
            heapq.heappush(res, (-dist, -node))
            if len(res) > ef:
                heapq.heappop(res)
        data = self.data
        while cand:
            cd, node = cand[0]
            if len(res) >= ef and cd > -res[0][0]:
                break
            heapq.heappop(cand)
            cnt = self.counts[layer, node]
            if cnt == 0:
                continue
            nbrs = self.links[layer, node, :cnt]
            fresh = nbrs[visited[nbrs] != epoch]
            if fresh.size == 0:
                continue
            visited[fresh] = epoch
            diff = data[fresh] - q
            dists = np.einsum("ij,ij->i", diff, diff)
            for nb, dd in zip(fresh.tolist(), dists.tolist()):
                if len(res) < ef or dd < -res[0][0]:
                    heapq.heappush(cand, (dd, nb))
                    heapq.heappush(res, (-dd, -nb))
                    if len(res) > ef:
                        heapq.heappop(res)
        return sorted((-nd, -nn) for nd, nn in res)

    def select_neighbors(self, cands, limit, keep_pruned):
        data = self.data
        chosen: list[int] = []
        pruned: list[int] = []
        for dq, e in cands:
            if len(chosen) >= limit:
                break
            if chosen:
                diff = data[chosen] - data[e]
                if np.any(np.einsum("ij,ij->i", diff, diff) < dq):
                    pruned.append(e)
                    continue
            chosen.append(e)
        if keep_pruned:
            for e in pruned:
                if len(chosen) >= limit:
                    break
                chosen.append(e)
        return chosen

    def connect(self, node, layer, limit, chosen, keep_pruned):
        links, counts, data = self.links, self.counts, self.data
        links[layer, node, : len(chosen)] = chosen
        counts[layer, node] = len(chosen)
        for nb in chosen:
            cnt = counts[layer, nb]
            if cnt < limit:
                links[layer, nb, cnt] = node
                counts[layer, nb] = cnt + 1
                continue
            members = [node] + links[layer, nb, :cnt].tolist()
            diff = data[members] - data[nb]
            dists = np.einsum("ij,ij->i", diff, diff).tolist()
            kept = self.select_neighbors(sorted(zip(dists, members)), limit, keep_pruned)
            links[layer, nb, : len(kept)] = kept
            counts[layer, nb] = len(kept)


def hnsw_build(data, levels, M, ef_construction, keep_pruned=True):
    """Insert rows of ``data`` in order; returns (links, counts, entry, max_level)."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    levels = np.asarray(levels, dtype=np.int32)
    n = data.shape[0]
    max_level = int(levels.max()) if n else 0
    cap = 2 * M
    links = np.full((max_level + 1, n, cap), -1, dtype=np.int32)
    counts = np.zeros((max_level + 1, n), dtype=np.int32)
    if n == 0:
        return links, counts, -1, 0
    g = _Graph(data, links, counts)
    entry, cur_top = -1, -1
    for i in range(n):
        top = int(levels[i])
        if entry < 0:
            entry, cur_top = i, top
            continue
        q = data[i]
        eps = [(_l2sq(q, data[entry]), entry)]
        for layer in range(cur_top, top, -1):
            eps = g.search_layer(q, eps, 1, layer)[:1]
        for layer in range(min(top, cur_top), -1, -1):
            found = g.search_layer(q, eps, ef_construction, layer)
            limit = cap if layer == 0 else M
            chosen = g.select_neighbors(found, M, keep_pruned)
            g.connect(i, layer, limit, chosen, keep_pruned)
            eps = found
        if top > cur_top:
            cur_top, entry = top, i
    return links, counts, entry, cur_top


def hnsw_search(data, links, counts, entry, max_level, queries, k, ef):
    """Batched k-NN; returns (ids int64 [m, k] padded with -1, dists float32 [m, k])."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    m = queries.shape[0]
    ids = np.full((m, max(k, 0)), -1, dtype=np.int64)
    dists = np.full((m, max(k, 0)), np.inf, dtype=np.float32)
    if data.shape[0] == 0 or m == 0 or k <= 0:
        return ids, dists
    if queries.shape[1] != data.shape[1]:
        raise ValueError("query dimension does not match index")
    g = _Graph(data, links, counts)
    width = max(ef, k)
    for qi in range(m):
        q = queries[qi]
        eps = [(_l2sq(q, data[entry]), entry)]
        for layer in range(max_level, 0, -1):
            eps = g.search_layer(q, eps, 1, layer)[:1]
        found = g.search_layer(q, eps, width, 0)[:k]
        for j, (dd, node) in enumerate(found):
            ids[qi, j] = node
            dists[qi, j] = dd
    return ids, np.sqrt(dists)


def hamming_many(code, codes):
    """Bit distance from ``code`` to every row of ``codes``."""
    code = np.asarray(code, dtype=np.uint64)
    codes = np.asarray(codes, dtype=np.uint64)
    if codes.ndim != 2 or codes.shape[1] != code.shape[0]:
        raise ValueError("code width mismatch")
    return np.bitwise_count(codes ^ code).sum(axis=1).astype(np.int64)
