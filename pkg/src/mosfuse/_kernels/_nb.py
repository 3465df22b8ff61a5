"""numba-compiled kernels; same contracts as ``_np``."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def pair_counts(x, y):
    n = x.shape[0]
    c = 0
    d = 0
    tx = 0
    ty = 0
    tb = 0
    for i in range(n - 1):
        xi = x[i]
        yi = y[i]
        for j in range(i + 1, n):
            dx = x[j] - xi
            dy = y[j] - yi
            if dx == 0.0:
                if dy == 0.0:
                    tb += 1
                else:
                    tx += 1
            elif dy == 0.0:
                ty += 1
            elif (dx > 0.0) == (dy > 0.0):
                c += 1
            else:
                d += 1
    return c, d, tx, ty, tb


@njit(cache=True)
def nearest_centroid(points, centroids):
    n, f = points.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        arg = 0
        for j in range(k):
            acc = 0.0
            for m in range(f):
                t = points[i, m] - centroids[j, m]
                acc += t * t
            if acc < best:
                best = acc
                arg = j
        labels[i] = arg
        dists[i] = best
    return labels, dists


@njit(cache=True)
def _sign(x):
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


@njit(cache=True)
def batch_gradients(V, y, ptr, lis, sc, batch, W, a, b, E, ch, ce, d,
                    alpha, beta, le):
    nb = batch.shape[0]
    f, dim = W.shape
    H = np.zeros((nb, dim))
    for i in range(nb):
        u = batch[i]
        for m in range(f):
            vm = V[u, m]
            for k in range(dim):
                H[i, k] += vm * W[m, k]
    gH = np.zeros((nb, dim))
    ga = np.zeros(dim)
    gb = np.zeros(1)
    loss_ssl = 0.0
    for i in range(nb):
        p = b[0]
        for k in range(dim):
            p += a[k] * H[i, k]
        res = p - y[batch[i]]
        loss_ssl += abs(res)
        r = (alpha / nb) * _sign(res)
        gb[0] += r
        for k in range(dim):
            ga[k] += r * H[i, k]
            gH[i, k] = r * a[k]
    loss_ssl /= nb

    gE = np.zeros_like(E)
    gch = np.zeros_like(ch)
    gce = np.zeros_like(ce)
    gd = np.zeros(1)
    loss_le = 0.0
    if le:
        npairs = 0
        for i in range(nb):
            u = batch[i]
            npairs += ptr[u + 1] - ptr[u]
        edim = E.shape[1]
        for i in range(nb):
            u = batch[i]
            ssum = 0.0
            for q in range(ptr[u], ptr[u + 1]):
                li = lis[q]
                p = d[0]
                for k in range(dim):
                    p += ch[k] * H[i, k]
                for k in range(edim):
                    p += ce[k] * E[li, k]
                res = p - sc[q]
                loss_le += abs(res)
                s = (beta / npairs) * _sign(res)
                gd[0] += s
                ssum += s
                for k in range(dim):
                    gch[k] += s * H[i, k]
                for k in range(edim):
                    gce[k] += s * E[li, k]
                    gE[li, k] += s * ce[k]
            for k in range(dim):
                gH[i, k] = gH[i, k] + ssum * ch[k]
        loss_le /= npairs

    gW = np.zeros((f, dim))
    for i in range(nb):
        u = batch[i]
        for m in range(f):
            vm = V[u, m]
            for k in range(dim):
                gW[m, k] += vm * gH[i, k]
    return gW, ga, gb, gE, gch, gce, gd, loss_ssl, loss_le


@njit(cache=True)
def sgd_epoch(V, y, ptr, lis, sc, order, batch_size, W, a, b, E, ch, ce, d,
              lr, alpha, beta, le):
    tot_ssl = 0.0
    tot_le = 0.0
    nbatch = 0
    n = order.shape[0]
    for s in range(0, n, batch_size):
        batch = order[s:min(s + batch_size, n)]
        gW, ga, gb, gE, gch, gce, gd, l_ssl, l_le = batch_gradients(
            V, y, ptr, lis, sc, batch, W, a, b, E, ch, ce, d, alpha, beta, le)
        W -= lr * gW
        a -= lr * ga
        b -= lr * gb
        if le:
            E -= lr * gE
            ch -= lr * gch
            ce -= lr * gce
            d -= lr * gd
        tot_ssl += l_ssl
        tot_le += l_le
        nbatch += 1
    return tot_ssl / nbatch, tot_le / nbatch


@njit(cache=True)
def rmsprop_epoch(X, y, w, v, order, batch_size, lr, rho, eps):
    n = order.shape[0]
    c = X.shape[1]
    tot = 0.0
    nbatch = 0
    g = np.zeros(c)
    for s in range(0, n, batch_size):
        e = min(s + batch_size, n)
        nb = e - s
        g[:] = 0.0
        sq = 0.0
        for q in range(s, e):
            i = order[q]
            p = 0.0
            for j in range(c):
                p += X[i, j] * w[j]
            res = p - y[i]
            sq += res * res
            for j in range(c):
                g[j] += X[i, j] * res
        for j in range(c):
            gj = (2.0 / nb) * g[j]
            v[j] = rho * v[j] + (1.0 - rho) * gj * gj
            w[j] -= lr * gj / (np.sqrt(v[j]) + eps)
        tot += sq / nb
        nbatch += 1
    return tot / nbatch
