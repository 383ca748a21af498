"""Backend parity and closed-form checks for the hot kernels."""

import numpy as np
import pytest

from defield.kernels import get_impl

BACKENDS = ["numpy", "numba"]


@pytest.fixture(params=BACKENDS)
def impl(request):
    return get_impl(request.param)


def _random_plane(rng, ra=8, rb=8, f=4, dtype=np.float64):
    return rng.normal(size=(ra, rb, f)).astype(dtype)


class TestBilerp:
    def test_exact_at_power_of_two_nodes(self, impl):
        rng = np.random.default_rng(0)
        data = _random_plane(rng, 9, 9)
        for i in range(9):
            for j in range(9):
                u = np.array([i / 8.0])
                v = np.array([j / 8.0])
                feat = impl.bilerp_gather(data, u, v)[0]
                assert np.array_equal(feat[0], data[i, j])

    def test_cell_center_is_corner_mean(self, impl):
        rng = np.random.default_rng(1)
        data = _random_plane(rng, 5, 5)
        u = np.array([(1 + 0.5) / 4.0])
        v = np.array([(2 + 0.5) / 4.0])
        feat = impl.bilerp_gather(data, u, v)[0][0]
        mean = 0.25 * (data[1, 2] + data[2, 2] + data[1, 3] + data[2, 3])
        np.testing.assert_allclose(feat, mean, rtol=1e-14)

    def test_matches_bruteforce_weighted_sum(self, impl):
        # direct 4-term weighted sum, written independently
        rng = np.random.default_rng(2)
        data = _random_plane(rng, 8, 8, 4)
        u, v = np.array([0.31]), np.array([0.77])
        feat = impl.bilerp_gather(data, u, v)[0][0]
        gx, gy = 0.31 * 7, 0.77 * 7
        i, j = int(gx), int(gy)
        fx, fy = gx - i, gy - j
        expected = (
            data[i, j] * (1 - fx) * (1 - fy)
            + data[i + 1, j] * fx * (1 - fy)
            + data[i, j + 1] * (1 - fx) * fy
            + data[i + 1, j + 1] * fx * fy
        )
        np.testing.assert_allclose(feat, expected, rtol=1e-13)

    def test_constant_one_plane_interpolates_to_exactly_one(self, impl):
        data = np.ones((7, 13, 3))
        rng = np.random.default_rng(3)
        u = rng.uniform(0, 1, 257)
        v = rng.uniform(0, 1, 257)
        feat = impl.bilerp_gather(data, u, v)[0]
        assert np.all(feat == 1.0)

    def test_out_of_range_clamps(self, impl):
        rng = np.random.default_rng(4)
        data = _random_plane(rng, 6, 6)
        lo = impl.bilerp_gather(data, np.array([-0.5]), np.array([0.3]))[0]
        edge = impl.bilerp_gather(data, np.array([0.0]), np.array([0.3]))[0]
        np.testing.assert_array_equal(lo, edge)

    def test_backward_scatters_at_most_four_nodes(self, impl):
        rng = np.random.default_rng(5)
        data = _random_plane(rng, 8, 8, 2)
        u, v = np.array([0.4]), np.array([0.6])
        feat, ia, ib, fa, fb = impl.bilerp_gather(data, u, v)
        grad = np.zeros_like(data)
        impl.bilerp_backward(data, ia, ib, fa, fb, np.ones((1, 2)), grad)
        touched = np.argwhere(np.any(grad != 0.0, axis=2))
        assert len(touched) <= 4

    def test_backward_fd(self, impl):
        rng = np.random.default_rng(6)
        data = _random_plane(rng, 8, 8, 3)
        u = np.array([0.331])
        v = np.array([0.772])
        up = rng.normal(size=(1, 3))
        feat, ia, ib, fa, fb = impl.bilerp_gather(data, u, v)
        grad = np.zeros_like(data)
        dfa, dfb = impl.bilerp_backward(data, ia, ib, fa, fb, up, grad)
        h = 1e-6

        def val(uu, vv, d):
            return float(np.sum(up * impl.bilerp_gather(d, uu, vv)[0]))

        fd_u = (val(u + h, v, data) - val(u - h, v, data)) / (2 * h)
        np.testing.assert_allclose(dfa[0] * 7, fd_u, rtol=1e-6)
        fd_v = (val(u, v + h, data) - val(u, v - h, data)) / (2 * h)
        np.testing.assert_allclose(dfb[0] * 7, fd_v, rtol=1e-6)
        flat = data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in rng.choice(flat.size, 10, replace=False):
            old = flat[i]
            flat[i] = old + h
            up_v = val(u, v, data)
            flat[i] = old - h
            dn_v = val(u, v, data)
            flat[i] = old
            np.testing.assert_allclose(
                gflat[i], (up_v - dn_v) / (2 * h), rtol=1e-5, atol=1e-12
            )


class TestPlanesFused:
    def _setup(self, rng, dtype=np.float64):
        planes = tuple(
            rng.normal(size=s).astype(dtype)
            for s in [(8, 8, 4), (6, 8, 4), (8, 5, 4)]
        )
        axes_a = np.array([0, 1, 0], dtype=np.int64)
        axes_b = np.array([1, 2, 2], dtype=np.int64)
        pts = rng.uniform(0.05, 0.95, (50, 3))
        return planes, axes_a, axes_b, pts

    def test_matches_per_plane_product(self, impl):
        rng = np.random.default_rng(7)
        planes, axes_a, axes_b, pts = self._setup(rng)
        prod, idx, frac, feats, ncl = impl.planes_gather(
            planes, pts, axes_a, axes_b
        )
        assert ncl == 0
        expect = np.ones_like(prod)
        for j, data in enumerate(planes):
            f = impl.bilerp_gather(
                data, np.ascontiguousarray(pts[:, axes_a[j]]),
                np.ascontiguousarray(pts[:, axes_b[j]])
            )[0]
            expect = expect * f
        np.testing.assert_allclose(prod, expect, rtol=1e-13)

    def test_clamp_count(self, impl):
        rng = np.random.default_rng(8)
        planes, axes_a, axes_b, pts = self._setup(rng)
        pts[0, 1] = -0.2
        pts[3, 0] = 1.7
        ncl = impl.planes_gather(planes, pts, axes_a, axes_b)[4]
        assert ncl == 2

    def test_backward_fd(self, impl):
        rng = np.random.default_rng(9)
        planes, axes_a, axes_b, pts = self._setup(rng)
        pts = pts[:5]
        up = rng.normal(size=(5, 4))
        prod, idx, frac, feats, _ = impl.planes_gather(
            planes, pts, axes_a, axes_b
        )
        grads = tuple(np.zeros_like(p) for p in planes)
        pg = impl.planes_backward(
            planes, grads, idx, frac, feats, up, axes_a, axes_b, True, 3
        )
        h = 1e-6

        def val(p, pl):
            return float(np.sum(
                up * impl.planes_gather(pl, p, axes_a, axes_b)[0]
            ))

        for d in range(3):
            for m in range(5):
                p_hi = pts.copy()
                p_hi[m, d] += h
                p_lo = pts.copy()
                p_lo[m, d] -= h
                fd = (val(p_hi, planes) - val(p_lo, planes)) / (2 * h)
                np.testing.assert_allclose(pg[m, d], fd, rtol=2e-5, atol=1e-9)
        for j in range(3):
            flat = planes[j].reshape(-1)
            gflat = grads[j].reshape(-1)
            for i in rng.choice(flat.size, 8, replace=False):
                old = flat[i]
                flat[i] = old + h
                hi = val(pts, planes)
                flat[i] = old - h
                lo = val(pts, planes)
                flat[i] = old
                np.testing.assert_allclose(
                    gflat[i], (hi - lo) / (2 * h), rtol=1e-5, atol=1e-9
                )


class TestComposite:
    def test_single_sample_ln2(self, impl):
        sigma = np.array([[np.log(2.0)]])
        delta = np.array([[1.0]])
        _, _, w = impl.composite_forward(sigma, delta)
        assert abs(w[0, 0] - 0.5) < 1e-12

    def test_two_samples_ln2(self, impl):
        sigma = np.full((1, 2), np.log(2.0))
        delta = np.ones((1, 2))
        _, _, w = impl.composite_forward(sigma, delta)
        assert abs(w[0, 0] - 0.5) < 1e-12
        assert abs(w[0, 1] - 0.25) < 1e-12

    def test_matches_explicit_product_formulation(self, impl):
        # Eq-style oracle: w_i = (prod_{j<i} exp(-d_j s_j)) (1-exp(-d_i s_i))
        rng = np.random.default_rng(10)
        sigma = rng.uniform(0, 5, (4, 16))
        delta = rng.uniform(0.01, 0.2, (4, 16))
        _, trans, w = impl.composite_forward(sigma, delta)
        for r in range(4):
            for i in range(16):
                t = 1.0
                for j in range(i):
                    t *= np.exp(-delta[r, j] * sigma[r, j])
                wi = t * (1.0 - np.exp(-delta[r, i] * sigma[r, i]))
                assert abs(w[r, i] - wi) < 1e-9
                assert abs(trans[r, i] - t) < 1e-9

    def test_backward_fd(self, impl):
        rng = np.random.default_rng(11)
        sigma = rng.uniform(0.1, 3.0, (3, 8))
        delta = rng.uniform(0.05, 0.2, (3, 8))
        dw = rng.normal(size=(3, 8))
        att, trans, w = impl.composite_forward(sigma, delta)
        ds = impl.composite_backward(dw, att, trans, delta)
        h = 1e-6
        for r in range(3):
            for i in range(8):
                s_hi = sigma.copy()
                s_hi[r, i] += h
                s_lo = sigma.copy()
                s_lo[r, i] -= h
                w_hi = impl.composite_forward(s_hi, delta)[2]
                w_lo = impl.composite_forward(s_lo, delta)[2]
                fd = float(np.sum(dw * (w_hi - w_lo)) / (2 * h))
                np.testing.assert_allclose(ds[r, i], fd, rtol=1e-5, atol=1e-10)


class TestHashing:
    def test_uniform01_range_and_determinism(self, impl):
        keys = np.arange(100, dtype=np.uint64)
        a = impl.uniform01(keys, 16)
        b = impl.uniform01(keys, 16)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() < 1.0
        # distinct keys give distinct streams
        assert not np.array_equal(a[0], a[1])

    def test_mean_is_near_half(self, impl):
        keys = np.arange(2000, dtype=np.uint64)
        u = impl.uniform01(keys, 8)
        assert abs(u.mean() - 0.5) < 0.01


class TestBackendParity:
    def test_all_kernels_agree(self):
        npy = get_impl("numpy")
        nb = get_impl("numba")
        rng = np.random.default_rng(12)
        data = rng.normal(size=(9, 7, 4))
        u = rng.uniform(-0.1, 1.1, 200)
        v = rng.uniform(-0.1, 1.1, 200)
        f1, ia, ib, fa, fb = npy.bilerp_gather(data, u, v)
        f2 = nb.bilerp_gather(data, u, v)[0]
        assert np.array_equal(f1, f2)
        up = rng.normal(size=(200, 4))
        g1 = np.zeros_like(data)
        g2 = np.zeros_like(data)
        o1 = npy.bilerp_backward(data, ia, ib, fa, fb, up, g1)
        o2 = nb.bilerp_backward(data, ia, ib, fa, fb, up, g2)
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(o1[0], o2[0], rtol=1e-12)

        planes = tuple(rng.normal(size=(6, 6, 3)) for _ in range(3))
        aa = np.array([0, 1, 0], dtype=np.int64)
        bb = np.array([1, 2, 2], dtype=np.int64)
        pts = rng.uniform(0, 1, (64, 3))
        p1 = npy.planes_gather(planes, pts, aa, bb)
        p2 = nb.planes_gather(planes, pts, aa, bb)
        np.testing.assert_allclose(p1[0], p2[0], rtol=1e-12)
        assert p1[4] == p2[4]

        sigma = rng.uniform(0, 4, (8, 16))
        delta = rng.uniform(0.01, 0.2, (8, 16))
        c1 = npy.composite_forward(sigma, delta)
        c2 = nb.composite_forward(sigma, delta)
        for a, b in zip(c1, c2):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)
        dw = rng.normal(size=sigma.shape)
        d1 = npy.composite_backward(dw, *c1[:2], delta)
        d2 = nb.composite_backward(dw, *c2[:2], delta)
        np.testing.assert_allclose(d1, d2, rtol=1e-12, atol=1e-14)

        keys = np.arange(64, dtype=np.uint64)
        assert np.array_equal(npy.uniform01(keys, 9), nb.uniform01(keys, 9))
