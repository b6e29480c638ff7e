# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same API as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, fabs

from ._kernels_py import NotPositiveDefiniteError

cnp.import_array()


cdef Py_ssize_t _ereach(Py_ssize_t k, const long long[::1] Ap, const long long[::1] Ai,
                        long long[::1] parent, long long[::1] stack, long long[::1] path,
                        long long[::1] mark, Py_ssize_t n) nogil:
    cdef Py_ssize_t top = n, p, i, length
    mark[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            path[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            length -= 1
            top -= 1
            stack[top] = path[length]
    return top


def cholesky(Py_ssize_t n, indptr, indices, data):
    cdef const long long[::1] Ap = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const long long[::1] Ai = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const double[::1] Ax = np.ascontiguousarray(data, dtype=np.float64)
    cdef long long[::1] parent = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] ancestor = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] stack = np.zeros(n, dtype=np.int64)
    cdef long long[::1] path = np.zeros(n, dtype=np.int64)
    cdef long long[::1] mark = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] counts = np.ones(n, dtype=np.int64)
    cdef Py_ssize_t k, p, i, inext, top, t
    cdef double d, lki

    with nogil:
        for k in range(n):
            for p in range(Ap[k], Ap[k + 1]):
                i = Ai[p]
                while i != -1 and i < k:
                    inext = ancestor[i]
                    ancestor[i] = k
                    if inext == -1:
                        parent[i] = k
                    i = inext
        for k in range(n):
            top = _ereach(k, Ap, Ai, parent, stack, path, mark, n)
            for t in range(top, n):
                counts[stack[t]] += 1

    Lp_arr = np.zeros(n + 1, dtype=np.int64)
    cdef long long[::1] Lp = Lp_arr
    for k in range(n):
        Lp[k + 1] = Lp[k] + counts[k]
    Li_arr = np.zeros(Lp[n], dtype=np.int64)
    Lx_arr = np.zeros(Lp[n], dtype=np.float64)
    cdef long long[::1] Li = Li_arr
    cdef double[::1] Lx = Lx_arr
    cdef long long[::1] nxt = np.array(Lp_arr[:n])
    cdef double[::1] x = np.zeros(n, dtype=np.float64)
    mark[:] = -1

    cdef Py_ssize_t failed = -1
    with nogil:
        for k in range(n):
            top = _ereach(k, Ap, Ai, parent, stack, path, mark, n)
            x[k] = 0.0
            for p in range(Ap[k], Ap[k + 1]):
                if Ai[p] <= k:
                    x[Ai[p]] += Ax[p]
            d = x[k]
            x[k] = 0.0
            for t in range(top, n):
                i = stack[t]
                lki = x[i] / Lx[Lp[i]]
                x[i] = 0.0
                for p in range(Lp[i] + 1, nxt[i]):
                    x[Li[p]] -= Lx[p] * lki
                d -= lki * lki
                p = nxt[i]
                nxt[i] += 1
                Li[p] = k
                Lx[p] = lki
            if not d > 0.0:
                failed = k
                break
            p = nxt[k]
            nxt[k] += 1
            Li[p] = k
            Lx[p] = sqrt(d)
    if failed >= 0:
        raise NotPositiveDefiniteError(failed, d)
    return Lp_arr, Li_arr, Lx_arr


def cholesky_solve(Lp_in, Li_in, Lx_in, b):
    cdef const long long[::1] Lp = np.ascontiguousarray(Lp_in, dtype=np.int64)
    cdef const long long[::1] Li = np.ascontiguousarray(Li_in, dtype=np.int64)
    cdef const double[::1] Lx = np.ascontiguousarray(Lx_in, dtype=np.float64)
    out = np.array(b, dtype=np.float64)
    cdef double[::1] x = out
    cdef Py_ssize_t n = Lp.shape[0] - 1, j, p
    cdef double s, xj
    with nogil:
        for j in range(n):
            x[j] /= Lx[Lp[j]]
            xj = x[j]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p]] -= Lx[p] * xj
        for j in range(n - 1, -1, -1):
            s = x[j]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                s -= Lx[p] * x[Li[p]]
            x[j] = s / Lx[Lp[j]]
    return out


cdef void _congruence(double* P, const double* F, double* tmp, int n) noexcept nogil:
    # P <- F P F^T, row-major n x n
    cdef int i, j, k
    cdef double acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += F[i * n + k] * P[k * n + j]
            tmp[i * n + j] = acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += tmp[i * n + k] * F[j * n + k]
            P[i * n + j] = acc


cdef void _left_mul(double* A, const double* F, double* tmp, int n) noexcept nogil:
    # A <- F A
    cdef int i, j, k
    cdef double acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += F[i * n + k] * A[k * n + j]
            tmp[i * n + j] = acc
    for i in range(n * n):
        A[i] = tmp[i]


def constvel_chain(x0, inputs, dts, input_var, additive_var):
    cdef const double[:, ::1] u = np.ascontiguousarray(np.asarray(inputs, dtype=np.float64).reshape(-1, 3))
    cdef const double[::1] dt_v = np.ascontiguousarray(dts, dtype=np.float64)
    cdef const double[::1] qv = np.ascontiguousarray(input_var, dtype=np.float64)
    cdef const double[::1] av = np.ascontiguousarray(additive_var, dtype=np.float64)
    xo = np.array(x0, dtype=np.float64)
    phio = np.eye(5)
    Po = np.zeros((5, 5))
    cdef double[::1] x = xo
    cdef double[:, ::1] phi = phio
    cdef double[:, ::1] P = Po
    cdef double F[25]
    cdef double G[15]
    cdef double tmp[25]
    cdef Py_ssize_t step, i, j, k, m = u.shape[0]
    cdef double w, ax, ay, dt, psi, c, s, rax, ray, drax, dray, vx, vy, acc
    with nogil:
        for step in range(m):
            w = u[step, 0]
            ax = u[step, 1]
            ay = u[step, 2]
            dt = dt_v[step]
            psi = x[2] + w * dt
            c = cos(psi)
            s = sin(psi)
            rax = c * ax - s * ay
            ray = s * ax + c * ay
            drax = -s * ax - c * ay
            dray = c * ax - s * ay
            vx = x[3] + rax * dt
            vy = x[4] + ray * dt
            x[0] = x[0] + vx * dt
            x[1] = x[1] + vy * dt
            x[2] = psi
            x[3] = vx
            x[4] = vy
            for i in range(25):
                F[i] = 0.0
            for i in range(5):
                F[i * 5 + i] = 1.0
            F[3 * 5 + 2] = drax * dt
            F[4 * 5 + 2] = dray * dt
            F[0 * 5 + 2] = drax * dt * dt
            F[1 * 5 + 2] = dray * dt * dt
            F[0 * 5 + 3] = dt
            F[1 * 5 + 4] = dt
            for i in range(15):
                G[i] = 0.0
            G[2 * 3 + 0] = dt
            G[3 * 3 + 0] = drax * dt * dt
            G[4 * 3 + 0] = dray * dt * dt
            G[3 * 3 + 1] = c * dt
            G[3 * 3 + 2] = -s * dt
            G[4 * 3 + 1] = s * dt
            G[4 * 3 + 2] = c * dt
            for j in range(3):
                G[0 * 3 + j] = G[3 * 3 + j] * dt
                G[1 * 3 + j] = G[4 * 3 + j] * dt
            _left_mul(&phi[0, 0], F, tmp, 5)
            _congruence(&P[0, 0], F, tmp, 5)
            for i in range(5):
                for j in range(5):
                    acc = 0.0
                    for k in range(3):
                        acc += G[i * 3 + k] * qv[k] * G[j * 3 + k]
                    P[i, j] += acc
                P[i, i] += av[i] * dt
    return xo, phio, Po


def diffdrive_chain(x0, wheels, dts, double radius, double track, base_var,
                    double scale_moving, double scale_stationary, double threshold):
    cdef const double[:, ::1] u = np.ascontiguousarray(np.asarray(wheels, dtype=np.float64).reshape(-1, 2))
    cdef const double[::1] dt_v = np.ascontiguousarray(dts, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(base_var, dtype=np.float64)
    xo = np.array(x0, dtype=np.float64)
    phio = np.eye(3)
    Po = np.zeros((3, 3))
    cdef double[::1] x = xo
    cdef double[:, ::1] phi = phio
    cdef double[:, ::1] P = Po
    cdef double F[9]
    cdef double tmp[9]
    cdef Py_ssize_t step, i, m = u.shape[0]
    cdef double wl, wr, dt, v, yaw_rate, mid, scale
    with nogil:
        for step in range(m):
            wl = u[step, 0]
            wr = u[step, 1]
            dt = dt_v[step]
            v = radius * (wl + wr) / 2.0
            yaw_rate = radius * (wr - wl) / track
            mid = x[2] + 0.5 * yaw_rate * dt
            for i in range(9):
                F[i] = 0.0
            F[0] = F[4] = F[8] = 1.0
            F[2] = -v * dt * sin(mid)
            F[5] = v * dt * cos(mid)
            x[0] = x[0] + v * dt * cos(mid)
            x[1] = x[1] + v * dt * sin(mid)
            x[2] = x[2] + yaw_rate * dt
            if fabs(wl) + fabs(wr) > threshold:
                scale = scale_moving
            else:
                scale = scale_stationary
            _left_mul(&phi[0, 0], F, tmp, 3)
            _congruence(&P[0, 0], F, tmp, 3)
            for i in range(3):
                P[i, i] += scale * bv[i] * dt
    return xo, phio, Po
