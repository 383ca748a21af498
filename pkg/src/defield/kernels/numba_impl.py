"""Numba @njit twins of the reference kernels in ``numpy_impl``.

Arithmetic is kept in the same order as the numpy path (including the
four corner-accumulation passes in the scatter). Results match the
reference bit-for-bit except for the compositing kernels, where the
two exp implementations can differ by ~1 ulp.
"""

import numpy as np
from numba import njit, prange

SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
SM64_M1 = np.uint64(0xBF58476D1CE4E5B9)
SM64_M2 = np.uint64(0x94D049BB133111EB)
JITTER_STRIDE = np.uint64(0x2545F4914F6CDD1D)
_U53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _sm64(x):
    z = x + SM64_GAMMA
    z = (z ^ (z >> np.uint64(30))) * SM64_M1
    z = (z ^ (z >> np.uint64(27))) * SM64_M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def splitmix64(x):
    out = np.empty(x.shape[0], dtype=np.uint64)
    for i in range(x.shape[0]):
        out[i] = _sm64(x[i])
    return out


@njit(cache=True, parallel=True)
def uniform01(keys, n):
    r = keys.shape[0]
    out = np.empty((r, n), dtype=np.float64)
    for i in prange(r):
        for j in range(n):
            z = _sm64(keys[i] + np.uint64(j + 1) * JITTER_STRIDE)
            out[i, j] = np.float64(z >> np.uint64(11)) * _U53
    return out


@njit(cache=True, parallel=True)
def bilerp_gather(data, u, v):
    ra, rb, f = data.shape
    m = u.shape[0]
    feat = np.empty((m, f), dtype=np.float64)
    ia = np.empty(m, dtype=np.int64)
    ib = np.empty(m, dtype=np.int64)
    fa = np.empty(m, dtype=np.float64)
    fb = np.empty(m, dtype=np.float64)
    for p in prange(m):
        ga = min(max(u[p] * (ra - 1), 0.0), float(ra - 1))
        gb = min(max(v[p] * (rb - 1), 0.0), float(rb - 1))
        i = min(np.int64(ga), ra - 2)
        j = min(np.int64(gb), rb - 2)
        xa = ga - i
        xb = gb - j
        ia[p] = i
        ib[p] = j
        fa[p] = xa
        fb[p] = xb
        for k in range(f):
            top = (1.0 - xa) * data[i, j, k] + xa * data[i + 1, j, k]
            bot = (1.0 - xa) * data[i, j + 1, k] + xa * data[i + 1, j + 1, k]
            feat[p, k] = (1.0 - xb) * top + xb * bot
    return feat, ia, ib, fa, fb


@njit(cache=True)
def bilerp_backward(data, ia, ib, fa, fb, dfeat, grad_out):
    m, f = dfeat.shape
    dfa = np.empty(m, dtype=np.float64)
    dfb = np.empty(m, dtype=np.float64)
    for p in range(m):
        i = ia[p]
        j = ib[p]
        wa0 = 1.0 - fa[p]
        wa1 = fa[p]
        wb0 = 1.0 - fb[p]
        wb1 = fb[p]
        sa = 0.0
        sb = 0.0
        for k in range(f):
            d00 = data[i, j, k]
            d10 = data[i + 1, j, k]
            d01 = data[i, j + 1, k]
            d11 = data[i + 1, j + 1, k]
            sa += dfeat[p, k] * (wb0 * (d10 - d00) + wb1 * (d11 - d01))
            sb += dfeat[p, k] * (
                (wa0 * d01 + wa1 * d11) - (wa0 * d00 + wa1 * d10)
            )
        dfa[p] = sa
        dfb[p] = sb
    # four corner passes in point order, mirroring np.add.at in the twin
    for p in range(m):
        w = (1.0 - fb[p]) * (1.0 - fa[p])
        for k in range(f):
            grad_out[ia[p], ib[p], k] += dfeat[p, k] * w
    for p in range(m):
        w = (1.0 - fb[p]) * fa[p]
        for k in range(f):
            grad_out[ia[p] + 1, ib[p], k] += dfeat[p, k] * w
    for p in range(m):
        w = fb[p] * (1.0 - fa[p])
        for k in range(f):
            grad_out[ia[p], ib[p] + 1, k] += dfeat[p, k] * w
    for p in range(m):
        w = fb[p] * fa[p]
        for k in range(f):
            grad_out[ia[p] + 1, ib[p] + 1, k] += dfeat[p, k] * w
    return dfa, dfb


@njit(cache=True, parallel=True)
def planes_gather(planes, pts, axes_a, axes_b):
    m = pts.shape[0]
    k = len(planes)
    f = planes[0].shape[2]
    idx = np.empty((m, k, 2), dtype=np.int64)
    frac = np.empty((m, k, 2), dtype=np.float64)
    feats = np.empty((m, k, f), dtype=planes[0].dtype)
    prod = np.empty((m, f), dtype=planes[0].dtype)
    n_clamped = 0
    for p in prange(m):
        for d in range(pts.shape[1]):
            if pts[p, d] < 0.0 or pts[p, d] > 1.0:
                n_clamped += 1
        for j in range(k):
            data = planes[j]
            ra = data.shape[0]
            rb = data.shape[1]
            ga = min(max(np.float64(pts[p, axes_a[j]]) * (ra - 1), 0.0),
                     np.float64(ra - 1))
            gb = min(max(np.float64(pts[p, axes_b[j]]) * (rb - 1), 0.0),
                     np.float64(rb - 1))
            i = min(np.int64(ga), ra - 2)
            jj = min(np.int64(gb), rb - 2)
            fa = ga - i
            fb = gb - jj
            idx[p, j, 0] = i
            idx[p, j, 1] = jj
            frac[p, j, 0] = fa
            frac[p, j, 1] = fb
            for q in range(f):
                top = (1.0 - fa) * data[i, jj, q] + fa * data[i + 1, jj, q]
                bot = (1.0 - fa) * data[i, jj + 1, q] + \
                    fa * data[i + 1, jj + 1, q]
                feats[p, j, q] = (1.0 - fb) * top + fb * bot
        for q in range(f):
            acc = feats[p, 0, q]
            for j in range(1, k):
                acc = acc * feats[p, j, q]
            prod[p, q] = acc
    return prod, idx, frac, feats, n_clamped


@njit(cache=True)
def planes_backward(planes, grads, idx, frac, feats, upstream,
                    axes_a, axes_b, need_point_grad, point_dim):
    m, k, f = feats.shape
    if need_point_grad:
        point_grad = np.zeros((m, point_dim), dtype=np.float64)
    else:
        point_grad = np.zeros((1, 1), dtype=np.float64)
    prefix = np.empty((k, f), dtype=feats.dtype)
    suffix = np.empty((k, f), dtype=feats.dtype)
    for p in range(m):
        for q in range(f):
            run = feats.dtype.type(1.0)
            for j in range(k):
                prefix[j, q] = run
                run = run * feats[p, j, q]
            run = feats.dtype.type(1.0)
            for j in range(k - 1, -1, -1):
                suffix[j, q] = run
                run = run * feats[p, j, q]
        for j in range(k):
            data = planes[j]
            grad = grads[j]
            i = idx[p, j, 0]
            jj = idx[p, j, 1]
            fa = frac[p, j, 0]
            fb = frac[p, j, 1]
            w00 = (1.0 - fb) * (1.0 - fa)
            w10 = (1.0 - fb) * fa
            w01 = fb * (1.0 - fa)
            w11 = fb * fa
            sa = 0.0
            sb = 0.0
            for q in range(f):
                df = upstream[p, q] * (prefix[j, q] * suffix[j, q])
                d00 = data[i, jj, q]
                d10 = data[i + 1, jj, q]
                d01 = data[i, jj + 1, q]
                d11 = data[i + 1, jj + 1, q]
                sa += df * ((1.0 - fb) * (d10 - d00) + fb * (d11 - d01))
                sb += df * ((1.0 - fa) * (d01 - d00) + fa * (d11 - d10))
                grad[i, jj, q] += df * w00
                grad[i + 1, jj, q] += df * w10
                grad[i, jj + 1, q] += df * w01
                grad[i + 1, jj + 1, q] += df * w11
            if need_point_grad:
                ra = data.shape[0]
                rb = data.shape[1]
                point_grad[p, axes_a[j]] += sa * (ra - 1)
                point_grad[p, axes_b[j]] += sb * (rb - 1)
    return point_grad


@njit(cache=True, parallel=True)
def composite_forward(sigma, delta):
    r, n = sigma.shape
    att = np.empty((r, n), dtype=np.float64)
    trans = np.empty((r, n), dtype=np.float64)
    weights = np.empty((r, n), dtype=np.float64)
    for i in prange(r):
        t = 1.0
        for j in range(n):
            a = np.exp(-delta[i, j] * sigma[i, j])
            att[i, j] = a
            trans[i, j] = t
            weights[i, j] = t * (1.0 - a)
            t = t * a
    return att, trans, weights


@njit(cache=True, parallel=True)
def composite_backward(dweights, att, trans, delta):
    r, n = att.shape
    dsigma = np.empty((r, n), dtype=np.float64)
    for i in prange(r):
        suffix = 0.0
        for j in range(n - 1, -1, -1):
            dsigma[i, j] = delta[i, j] * (
                dweights[i, j] * trans[i, j] * att[i, j] - suffix
            )
            suffix += dweights[i, j] * (trans[i, j] * (1.0 - att[i, j]))
    return dsigma
