# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled graph kernels. Semantics match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdint cimport int64_t, uint8_t, uint32_t

cnp.import_array()


cdef inline double _dot(const float[:, ::1] V, Py_ssize_t i, const double[::1] q) noexcept nogil:
    cdef Py_ssize_t k
    cdef double s = 0.0
    for k in range(V.shape[1]):
        s += V[i, k] * q[k]
    return s


cdef inline double _l2(const float[:, ::1] V, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef Py_ssize_t k
    cdef double s = 0.0, t
    for k in range(V.shape[1]):
        t = <double>V[a, k] - <double>V[b, k]
        s += t * t
    return sqrt(s)


cdef inline bint _before(double s1, int64_t i1, double s2, int64_t i2) noexcept nogil:
    # queue order: higher score first, then lower id
    return s1 > s2 or (s1 == s2 and i1 < i2)


cdef Py_ssize_t _search(const int64_t[:, ::1] adj, const int64_t[::1] deg,
                        const float[:, ::1] V, const double[::1] q,
                        int64_t entry, Py_ssize_t L,
                        int64_t[::1] qid, double[::1] qsc, uint8_t[::1] qexp,
                        uint32_t[::1] seen, uint32_t stamp,
                        int64_t[::1] visited, Py_ssize_t *n_visited) noexcept nogil:
    cdef Py_ssize_t n = 1, i, j, pos, t, nv = 0
    cdef int64_t node, nb
    cdef double sc
    qid[0] = entry
    qsc[0] = _dot(V, entry, q)
    qexp[0] = 0
    seen[entry] = stamp
    while True:
        i = 0
        while i < n and qexp[i]:
            i += 1
        if i == n:
            break
        qexp[i] = 1
        node = qid[i]
        visited[nv] = node
        nv += 1
        for j in range(deg[node]):
            nb = adj[node, j]
            if seen[nb] == stamp:
                continue
            seen[nb] = stamp
            sc = _dot(V, nb, q)
            pos = 0
            while pos < n and _before(qsc[pos], qid[pos], sc, nb):
                pos += 1
            if pos >= L:
                continue
            if n < L:
                n += 1
            t = n - 1
            while t > pos:
                qid[t] = qid[t - 1]
                qsc[t] = qsc[t - 1]
                qexp[t] = qexp[t - 1]
                t -= 1
            qid[pos] = nb
            qsc[pos] = sc
            qexp[pos] = 0
    n_visited[0] = nv
    return n


def greedy_search_ip(adj, deg, vectors, query, entry, L):
    cdef const int64_t[:, ::1] A = np.ascontiguousarray(adj, dtype=np.int64)
    cdef const int64_t[::1] D = np.ascontiguousarray(deg, dtype=np.int64)
    cdef const float[:, ::1] V = np.ascontiguousarray(vectors, dtype=np.float32)
    cdef const double[::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef Py_ssize_t N = V.shape[0], cap = L, n, nv = 0
    cdef int64_t e = entry
    qid = np.empty(cap, dtype=np.int64)
    qsc = np.empty(cap, dtype=np.float64)
    qexp = np.zeros(cap, dtype=np.uint8)
    seen = np.zeros(N, dtype=np.uint32)
    visited = np.empty(N, dtype=np.int64)
    cdef int64_t[::1] qid_v = qid
    cdef double[::1] qsc_v = qsc
    cdef uint8_t[::1] qexp_v = qexp
    cdef uint32_t[::1] seen_v = seen
    cdef int64_t[::1] vis_v = visited
    with nogil:
        n = _search(A, D, V, q, e, cap, qid_v, qsc_v, qexp_v, seen_v, 1, vis_v, &nv)
    return qid[:n].copy(), qsc[:n].copy(), visited[:nv].copy()


cdef Py_ssize_t _prune(int64_t p, int64_t *cand, Py_ssize_t nc,
                       const float[:, ::1] V, double alpha, Py_ssize_t R,
                       double *dist, uint8_t *alive, uint32_t[::1] mark, uint32_t stamp,
                       int64_t *out) noexcept nogil:
    cdef Py_ssize_t i, j, m = 0, k, no = 0
    cdef int64_t c, star, ti
    cdef double td
    # dedupe, drop p, compute distances
    for i in range(nc):
        c = cand[i]
        if c == p or mark[c] == stamp:
            continue
        mark[c] = stamp
        cand[m] = c
        dist[m] = _l2(V, p, c)
        m += 1
    # insertion sort by (dist, id)
    for i in range(1, m):
        td = dist[i]
        ti = cand[i]
        j = i - 1
        while j >= 0 and (dist[j] > td or (dist[j] == td and cand[j] > ti)):
            dist[j + 1] = dist[j]
            cand[j + 1] = cand[j]
            j -= 1
        dist[j + 1] = td
        cand[j + 1] = ti
    for i in range(m):
        alive[i] = 1
    i = 0
    while no < R:
        while i < m and not alive[i]:
            i += 1
        if i >= m:
            break
        star = cand[i]
        alive[i] = 0
        out[no] = star
        no += 1
        for k in range(i + 1, m):
            if alive[k] and alpha * _l2(V, star, cand[k]) <= dist[k]:
                alive[k] = 0
    return no


def robust_prune(int64_t p, cands, vectors, double alpha, Py_ssize_t R):
    cdef const float[:, ::1] V = np.ascontiguousarray(vectors, dtype=np.float32)
    c = np.ascontiguousarray(cands, dtype=np.int64).copy()
    cdef Py_ssize_t nc = c.shape[0], no
    if nc == 0:
        return np.empty(0, dtype=np.int64)
    cdef int64_t[::1] cv = c
    dist = np.empty(nc, dtype=np.float64)
    alive = np.empty(nc, dtype=np.uint8)
    out = np.empty(nc, dtype=np.int64)
    mark = np.zeros(V.shape[0], dtype=np.uint32)
    cdef double[::1] dv = dist
    cdef uint8_t[::1] av = alive
    cdef int64_t[::1] ov = out
    cdef uint32_t[::1] mv = mark
    no = _prune(p, &cv[0], nc, V, alpha, R, &dv[0], &av[0], mv, 1, &ov[0])
    return out[:no].copy()


def build_pass(cnp.ndarray adj, cnp.ndarray deg, vectors, order, int64_t entry,
               Py_ssize_t L, double alpha, Py_ssize_t R):
    cdef int64_t[:, ::1] A = adj
    cdef int64_t[::1] D = deg
    cdef const float[:, ::1] V = np.ascontiguousarray(vectors, dtype=np.float32)
    cdef const int64_t[::1] O = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t N = V.shape[0], d = V.shape[1]
    cdef Py_ssize_t cap = N + R + 1, n, nv = 0, i, j, k, no, nc, nn
    cdef int64_t p, nb
    cdef bint present
    qid = np.empty(L, dtype=np.int64)
    qsc = np.empty(L, dtype=np.float64)
    qexp = np.zeros(L, dtype=np.uint8)
    seen = np.zeros(N, dtype=np.uint32)
    mark = np.zeros(N, dtype=np.uint32)
    visited = np.empty(N, dtype=np.int64)
    cand = np.empty(cap, dtype=np.int64)
    dist = np.empty(cap, dtype=np.float64)
    alive = np.empty(cap, dtype=np.uint8)
    out = np.empty(cap, dtype=np.int64)
    newn = np.empty(R, dtype=np.int64)
    q = np.empty(d, dtype=np.float64)
    cdef int64_t[::1] qid_v = qid, vis_v = visited, cand_v = cand, out_v = out, new_v = newn
    cdef double[::1] qsc_v = qsc, dist_v = dist, q_v = q
    cdef uint8_t[::1] qexp_v = qexp, alive_v = alive
    cdef uint32_t[::1] seen_v = seen, mark_v = mark
    cdef uint32_t sstamp = 0, mstamp = 0
    with nogil:
        for i in range(O.shape[0]):
            p = O[i]
            for k in range(d):
                q_v[k] = V[p, k]
            sstamp += 1
            n = _search(A, D, V, q_v, entry, L, qid_v, qsc_v, qexp_v, seen_v, sstamp, vis_v, &nv)
            nc = 0
            for k in range(nv):
                cand_v[nc] = vis_v[k]
                nc += 1
            for k in range(D[p]):
                cand_v[nc] = A[p, k]
                nc += 1
            mstamp += 1
            no = _prune(p, &cand_v[0], nc, V, alpha, R, &dist_v[0], &alive_v[0], mark_v, mstamp, &out_v[0])
            for k in range(R):
                A[p, k] = -1
            for k in range(no):
                A[p, k] = out_v[k]
                new_v[k] = out_v[k]
            D[p] = no
            nn = no
            for j in range(nn):
                nb = new_v[j]
                present = False
                for k in range(D[nb]):
                    if A[nb, k] == p:
                        present = True
                        break
                if present:
                    continue
                if D[nb] < R:
                    A[nb, D[nb]] = p
                    D[nb] += 1
                else:
                    nc = 0
                    for k in range(D[nb]):
                        cand_v[nc] = A[nb, k]
                        nc += 1
                    cand_v[nc] = p
                    nc += 1
                    mstamp += 1
                    no = _prune(nb, &cand_v[0], nc, V, alpha, R, &dist_v[0], &alive_v[0], mark_v, mstamp, &out_v[0])
                    for k in range(R):
                        A[nb, k] = -1
                    for k in range(no):
                        A[nb, k] = out_v[k]
                    D[nb] = no
