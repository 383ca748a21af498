"""Pure-numpy reference kernels.

Every function here has an @njit twin in ``numba_impl`` performing the
same arithmetic in the same order. Interpolation, scatter, and hashing
agree bit-for-bit across backends; the compositing kernels may differ
by ~1 ulp because numpy's vectorized exp and libm's are not identical.
Keep the expression structure in sync when editing.
"""

import numpy as np

SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
SM64_M1 = np.uint64(0xBF58476D1CE4E5B9)
SM64_M2 = np.uint64(0x94D049BB133111EB)
JITTER_STRIDE = np.uint64(0x2545F4914F6CDD1D)
_U53 = 1.0 / 9007199254740992.0  # 2**-53


def splitmix64(x):
    """Finalizer of the splitmix64 generator; x is uint64 (array or scalar)."""
    z = x + SM64_GAMMA
    z = (z ^ (z >> np.uint64(30))) * SM64_M1
    z = (z ^ (z >> np.uint64(27))) * SM64_M2
    return z ^ (z >> np.uint64(31))


def uniform01(keys, n):
    """(R, n) doubles in [0, 1), sample j of ray r drawn from keys[r] + j."""
    keys = np.asarray(keys, dtype=np.uint64)
    idx = (np.arange(1, n + 1, dtype=np.uint64) * JITTER_STRIDE)[None, :]
    z = splitmix64(keys[:, None] + idx)
    return (z >> np.uint64(11)).astype(np.float64) * _U53


def bilerp_gather(data, u, v):
    """Bilinear read of a feature plane at normalized coordinates.

    data: (Ra, Rb, F); u, v: (M,) in [0, 1] (values outside are clamped).
    Returns (feat (M,F), ia, ib, fa, fb) with the cell indices and
    fractions retained for the backward pass.
    """
    ra, rb, _ = data.shape
    ga = np.clip(u * (ra - 1), 0.0, float(ra - 1))
    gb = np.clip(v * (rb - 1), 0.0, float(rb - 1))
    ia = np.minimum(ga.astype(np.int64), ra - 2)
    ib = np.minimum(gb.astype(np.int64), rb - 2)
    fa = ga - ia
    fb = gb - ib
    d00 = data[ia, ib]
    d10 = data[ia + 1, ib]
    d01 = data[ia, ib + 1]
    d11 = data[ia + 1, ib + 1]
    wa1 = fa[:, None]
    wa0 = (1.0 - fa)[:, None]
    top = wa0 * d00 + wa1 * d10
    bot = wa0 * d01 + wa1 * d11
    feat = (1.0 - fb)[:, None] * top + fb[:, None] * bot
    return feat, ia, ib, fa, fb


def bilerp_backward(data, ia, ib, fa, fb, dfeat, grad_out):
    """Backward of bilerp_gather.

    Accumulates plane gradients into grad_out in place (at most the 4
    touched nodes per query) and returns (dfa, dfb), the gradients with
    respect to the cell fractions. Accumulation order is point order,
    deterministic regardless of thread count.
    """
    d00 = data[ia, ib]
    d10 = data[ia + 1, ib]
    d01 = data[ia, ib + 1]
    d11 = data[ia + 1, ib + 1]
    wa1 = fa[:, None]
    wa0 = (1.0 - fa)[:, None]
    wb1 = fb[:, None]
    wb0 = (1.0 - fb)[:, None]
    dfa = np.sum(dfeat * (wb0 * (d10 - d00) + wb1 * (d11 - d01)), axis=1)
    dfb = np.sum(
        dfeat * ((wa0 * d01 + wa1 * d11) - (wa0 * d00 + wa1 * d10)), axis=1
    )
    np.add.at(grad_out, (ia, ib), dfeat * (wb0 * wa0))
    np.add.at(grad_out, (ia + 1, ib), dfeat * (wb0 * wa1))
    np.add.at(grad_out, (ia, ib + 1), dfeat * (wb1 * wa0))
    np.add.at(grad_out, (ia + 1, ib + 1), dfeat * (wb1 * wa1))
    return dfa, dfb


def _plane_taps(data, u, v):
    """Cell index, f64 fraction, and the lerped feature row per query."""
    ra, rb, _ = data.shape
    u = u.astype(np.float64)
    v = v.astype(np.float64)
    ga = np.minimum(np.maximum(u * (ra - 1), 0.0), np.float64(ra - 1))
    gb = np.minimum(np.maximum(v * (rb - 1), 0.0), np.float64(rb - 1))
    ia = np.minimum(ga.astype(np.int64), ra - 2)
    ib = np.minimum(gb.astype(np.int64), rb - 2)
    fa = ga - ia
    fb = gb - ib
    d00 = data[ia, ib]
    d10 = data[ia + 1, ib]
    d01 = data[ia, ib + 1]
    d11 = data[ia + 1, ib + 1]
    top = (1.0 - fa)[:, None] * d00 + fa[:, None] * d10
    bot = (1.0 - fa)[:, None] * d01 + fa[:, None] * d11
    feat = (1.0 - fb)[:, None] * top + fb[:, None] * bot
    return feat, ia, ib, fa, fb


def planes_gather(planes, pts, axes_a, axes_b):
    """Fused Hadamard gather over one level's planes.

    planes: tuple of (Ra,Rb,F) arrays (common dtype); pts (M,D);
    axes_a/axes_b: the point column each plane projects onto. Returns
    (prod (M,F), idx (M,K,2) int64, frac (M,K,2) f64, feats (M,K,F),
    n_clamped).
    """
    m = pts.shape[0]
    k = len(planes)
    f = planes[0].shape[2]
    dtype = planes[0].dtype
    idx = np.empty((m, k, 2), dtype=np.int64)
    frac = np.empty((m, k, 2), dtype=np.float64)
    feats = np.empty((m, k, f), dtype=dtype)
    n_clamped = int(np.sum((pts < 0.0) | (pts > 1.0)))
    for j, data in enumerate(planes):
        feat, ia, ib, fa, fb = _plane_taps(
            data, pts[:, axes_a[j]], pts[:, axes_b[j]]
        )
        idx[:, j, 0] = ia
        idx[:, j, 1] = ib
        frac[:, j, 0] = fa
        frac[:, j, 1] = fb
        feats[:, j] = feat
    prod = feats[:, 0].copy()
    for j in range(1, k):
        prod *= feats[:, j]
    return prod, idx, frac, feats, n_clamped


def planes_backward(planes, grads, idx, frac, feats, upstream,
                    axes_a, axes_b, need_point_grad, point_dim):
    """Fused backward for planes_gather.

    Accumulates plane gradients into grads (in place; at most 4 nodes
    per plane per query) and returns the gradient with respect to pts
    (M, point_dim), already scaled to normalized-coordinate units, or
    None when not requested."""
    m, k, f = feats.shape
    dtype = feats.dtype
    point_grad = (
        np.zeros((m, point_dim), dtype=np.float64)
        if need_point_grad else None
    )
    prefix = np.empty((m, k, f), dtype=dtype)
    suffix = np.empty((m, k, f), dtype=dtype)
    run = np.ones((m, f), dtype=dtype)
    for j in range(k):
        prefix[:, j] = run
        run = run * feats[:, j]
    run = np.ones((m, f), dtype=dtype)
    for j in range(k - 1, -1, -1):
        suffix[:, j] = run
        run = run * feats[:, j]
    for j, data in enumerate(planes):
        dfeat = upstream * (prefix[:, j] * suffix[:, j])
        ia = idx[:, j, 0]
        ib = idx[:, j, 1]
        fa = frac[:, j, 0]
        fb = frac[:, j, 1]
        dfa, dfb = bilerp_backward(data, ia, ib, fa, fb, dfeat, grads[j])
        if need_point_grad:
            ra, rb, _ = data.shape
            point_grad[:, axes_a[j]] += dfa * float(ra - 1)
            point_grad[:, axes_b[j]] += dfb * float(rb - 1)
    return point_grad


def composite_forward(sigma, delta):
    """Per-ray compositing: attenuation, transmittance, weights.

    sigma, delta: (R, N). att_i = exp(-delta_i * sigma_i); trans_i is
    the running product of att over earlier samples (1 for the first);
    weights_i = trans_i * (1 - att_i).
    """
    att = np.exp(-delta * sigma)
    trans = np.empty_like(att)
    trans[:, 0] = 1.0
    np.cumprod(att[:, :-1], axis=1, out=trans[:, 1:])
    weights = trans * (1.0 - att)
    return att, trans, weights


def composite_backward(dweights, att, trans, delta):
    """Gradient of the compositing weights with respect to sigma.

    dw_i/dsigma_i = trans_i * delta_i * att_i and, for k < i,
    dw_i/dsigma_k = -delta_k * w_i; the cross terms are folded into a
    suffix sum built back-to-front per ray.
    """
    weights = trans * (1.0 - att)
    n = att.shape[1]
    dsigma = np.empty_like(dweights)
    suffix = np.zeros(att.shape[0])
    for i in range(n - 1, -1, -1):
        dsigma[:, i] = delta[:, i] * (
            dweights[:, i] * trans[:, i] * att[:, i] - suffix
        )
        suffix += dweights[:, i] * weights[:, i]
    return dsigma
