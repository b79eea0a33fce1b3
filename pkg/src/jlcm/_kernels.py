"""Compiled per-subject loops for the Gaussian dimension factor."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def gaussian_terms(starts, r, wobs, Z, U):
    """Quadratic form plus log-determinant of each subject/class block.

    For subject ``i`` (rows ``starts[i]:starts[i+1]``) and class ``g`` returns
    ``r'V^-1 r - log|Sigma| + log|V|`` written with ``M = I + U Z'S^-1 Z U'``:
    ``r'S^-1 r - v'M^-1 v + log|M|``, ``v = U Z'S^-1 r``.
    """
    ns = starts.size - 1
    G = r.shape[1]
    q = Z.shape[1]
    out = np.empty((ns, G))
    SZZ = np.empty((q, q))
    Szr = np.empty((G, q))
    srr = np.empty(G)
    M = np.empty((q, q))
    v = np.empty(q)
    for i in range(ns):
        a, b = starts[i], starts[i + 1]
        SZZ[:] = 0.0
        Szr[:] = 0.0
        srr[:] = 0.0
        for j in range(a, b):
            w = wobs[j]
            for k in range(q):
                zk = w * Z[j, k]
                for m in range(k, q):
                    SZZ[k, m] += zk * Z[j, m]
                for g in range(G):
                    Szr[g, k] += zk * r[j, g]
            for g in range(G):
                srr[g] += w * r[j, g] * r[j, g]
        for k in range(q):
            for m in range(k):
                SZZ[k, m] = SZZ[m, k]
        for g in range(G):
            # M = I + U S_ZZ U', v = U S_Zr
            for k in range(q):
                for m in range(k + 1):
                    acc = 1.0 if k == m else 0.0
                    for l in range(k, q):
                        ukl = U[g, k, l]
                        for n in range(m, q):
                            acc += ukl * SZZ[l, n] * U[g, m, n]
                    M[k, m] = acc
                acc = 0.0
                for l in range(k, q):
                    acc += U[g, k, l] * Szr[g, l]
                v[k] = acc
            # Cholesky of M (lower part) with forward solve for v
            logdet = 0.0
            corr = 0.0
            for k in range(q):
                s = M[k, k]
                for l in range(k):
                    s -= M[k, l] * M[k, l]
                if s <= 0.0:
                    logdet = np.nan
                    break
                d = np.sqrt(s)
                logdet += 2.0 * np.log(d)
                for m in range(k + 1, q):
                    t = M[m, k]
                    for l in range(k):
                        t -= M[m, l] * M[k, l]
                    M[m, k] = t / d
                t = v[k]
                for l in range(k):
                    t -= M[k, l] * v[l]
                v[k] = t / d
                corr += v[k] * v[k]
            out[i, g] = srr[g] - corr + logdet
    return out
