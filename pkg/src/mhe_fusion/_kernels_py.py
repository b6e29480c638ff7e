"""Pure-Python kernels; reference implementation and import-time fallback.

The compiled module ``_kernels`` exposes the same functions with the same
signatures.  Matrices passed to the Cholesky routines are CSC with full
symmetric storage; only the upper triangle is read.
"""
import math

import numpy as np


class NotPositiveDefiniteError(ArithmeticError):
    """Cholesky pivot ``index`` was not positive."""

    def __init__(self, index, pivot):
        super().__init__(f"non-positive pivot {pivot:g} at column {index}")
        self.index = int(index)
        self.pivot = float(pivot)


def _etree(n, Ap, Ai):
    parent = [-1] * n
    ancestor = [-1] * n
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


def _ereach(k, Ap, Ai, parent, stack, mark, n):
    """Nonzero pattern of row ``k`` of L, topologically ordered, in ``stack[top:]``."""
    top = n
    mark[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        path = []
        while mark[i] != k:
            path.append(i)
            mark[i] = k
            i = parent[i]
        while path:
            top -= 1
            stack[top] = path.pop()
    return top


def cholesky(n, indptr, indices, data):
    """Up-looking sparse Cholesky ``A = L L^T``; returns ``(Lp, Li, Lx)`` of L in CSC."""
    Ap = [int(v) for v in indptr]
    Ai = [int(v) for v in indices]
    Ax = [float(v) for v in data]
    parent = _etree(n, Ap, Ai)
    stack = [0] * n
    mark = [-1] * n

    counts = [1] * n
    for k in range(n):
        top = _ereach(k, Ap, Ai, parent, stack, mark, n)
        for t in range(top, n):
            counts[stack[t]] += 1
    Lp = [0] * (n + 1)
    for k in range(n):
        Lp[k + 1] = Lp[k] + counts[k]
    nnz = Lp[n]
    Li = [0] * nnz
    Lx = [0.0] * nnz
    nxt = Lp[:n]
    mark = [-1] * n
    x = [0.0] * n

    for k in range(n):
        top = _ereach(k, Ap, Ai, parent, stack, mark, n)
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
            raise NotPositiveDefiniteError(k, d)
        p = nxt[k]
        nxt[k] += 1
        Li[p] = k
        Lx[p] = math.sqrt(d)
    return (np.array(Lp, dtype=np.int64), np.array(Li, dtype=np.int64), np.array(Lx))


def cholesky_solve(Lp, Li, Lx, b):
    """Solve ``L L^T x = b`` given the CSC factor from :func:`cholesky`."""
    n = len(Lp) - 1
    x = [float(v) for v in b]
    Lp = [int(v) for v in Lp]
    Li = [int(v) for v in Li]
    Lx = [float(v) for v in Lx]
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
    return np.array(x)


def constvel_chain(x0, inputs, dts, input_var, additive_var):
    """Planar strapdown-style integration over a chain of samples.

    State ``[px, py, heading, vx, vy]``; each input row is
    ``[yaw_rate, ax_body, ay_body]``.  Returns ``(x, Phi, P)`` with ``P``
    propagated from zero.
    """
    x = np.array(x0, dtype=float)
    phi = np.eye(5)
    P = np.zeros((5, 5))
    Qin = np.diag(input_var)
    add = np.asarray(additive_var, dtype=float)
    for (w, ax, ay), dt in zip(np.asarray(inputs, dtype=float), dts):
        psi = x[2] + w * dt
        c, s = math.cos(psi), math.sin(psi)
        ra = np.array([c * ax - s * ay, s * ax + c * ay])
        dra = np.array([-s * ax - c * ay, c * ax - s * ay])
        R = np.array([[c, -s], [s, c]])
        vn = x[3:5] + ra * dt
        x = np.array([x[0] + vn[0] * dt, x[1] + vn[1] * dt, psi, vn[0], vn[1]])
        F = np.eye(5)
        F[3:5, 2] = dra * dt
        F[0:2, 2] = dra * dt * dt
        F[0, 3] = F[1, 4] = dt
        G = np.zeros((5, 3))
        G[2, 0] = dt
        G[3:5, 0] = dra * dt * dt
        G[3:5, 1:3] = R * dt
        G[0:2, :] = G[3:5, :] * dt
        phi = F @ phi
        P = F @ P @ F.T + G @ Qin @ G.T + np.diag(add * dt)
    return x, phi, P


def diffdrive_chain(x0, wheels, dts, radius, track, base_var, scale_moving,
                    scale_stationary, threshold):
    """Differential-drive integration with midpoint heading.

    State ``[px, py, heading]``; each wheel row is ``[omega_left, omega_right]``.
    Returns ``(x, Phi, P)``.
    """
    x = np.array(x0, dtype=float)
    phi = np.eye(3)
    P = np.zeros((3, 3))
    base = np.asarray(base_var, dtype=float)
    for (wl, wr), dt in zip(np.asarray(wheels, dtype=float), dts):
        v = radius * (wl + wr) / 2.0
        yaw_rate = radius * (wr - wl) / track
        mid = x[2] + 0.5 * yaw_rate * dt
        F = np.eye(3)
        F[0, 2] = -v * dt * math.sin(mid)
        F[1, 2] = v * dt * math.cos(mid)
        x = np.array([x[0] + v * dt * math.cos(mid), x[1] + v * dt * math.sin(mid),
                      x[2] + yaw_rate * dt])
        scale = scale_moving if abs(wl) + abs(wr) > threshold else scale_stationary
        phi = F @ phi
        P = F @ P @ F.T + np.diag(scale * base * dt)
    return x, phi, P
