import numpy as np
import pytest

from sfarl.grids import (
    conv2_same,
    conv2_same_adjoint,
    conv2_same_adjoint_stack,
    conv2_same_bank,
    conv2_same_stack,
    conv_matrix_equiv_check,
    conv_matrix_for_image,
    conv_matrix_for_kernel,
    dct_basis,
    kernel_grad,
    kernel_grad_stack,
    normalize_vjp,
    realize_filter,
    realize_filter_bank,
    rot180,
)


class TestDctBasis:
    def test_1x1_with_dc_is_identity(self):
        b = dct_basis(1, include_dc=True)
        assert b.count == 1
        np.testing.assert_allclose(b.atoms[0], [[1.0]])

    def test_7x7_without_dc_has_48_atoms(self):
        assert dct_basis(7, include_dc=False).count == 48

    def test_counts_with_dc(self):
        assert dct_basis(3, include_dc=True).count == 9
        assert dct_basis(7, include_dc=True).count == 49

    @pytest.mark.parametrize("k,include_dc", [(3, True), (3, False), (7, True), (7, False)])
    def test_gram_matrix_is_identity(self, k, include_dc):
        # brute-force pairwise inner products
        b = dct_basis(k, include_dc)
        flat = b.atoms.reshape(b.count, -1)
        gram = flat @ flat.T
        np.testing.assert_allclose(gram, np.eye(b.count), atol=1e-12)

    def test_dc_excluded_atoms_are_zero_mean(self):
        b = dct_basis(5, include_dc=False)
        sums = b.atoms.sum(axis=(1, 2))
        np.testing.assert_allclose(sums, 0.0, atol=1e-12)

    @pytest.mark.parametrize("k", [0, 2, 4, -3])
    def test_rejects_even_or_nonpositive(self, k):
        with pytest.raises(ValueError):
            dct_basis(k)


class TestRealizeFilter:
    def test_one_hot_recovers_atom(self):
        b = dct_basis(3)
        for m in (0, 4, 8):
            c = np.zeros(9)
            c[m] = 1.0
            np.testing.assert_allclose(realize_filter(b, c), b.atoms[m], atol=1e-15)

    def test_scale_invariance(self):
        b = dct_basis(5)
        rng = np.random.default_rng(0)
        c = rng.normal(size=b.count)
        np.testing.assert_allclose(realize_filter(b, c), realize_filter(b, 5.0 * c),
                                   rtol=0, atol=1e-15)

    def test_matches_direct_summation(self):
        b = dct_basis(3)
        rng = np.random.default_rng(1)
        c = rng.normal(size=9)
        expected = sum(ci * atom for ci, atom in zip(c / np.linalg.norm(c), b.atoms))
        np.testing.assert_allclose(realize_filter(b, c), expected, atol=1e-14)

    def test_unit_norm(self):
        b = dct_basis(7)
        rng = np.random.default_rng(2)
        for _ in range(5):
            f = realize_filter(b, rng.normal(size=b.count))
            assert abs(np.linalg.norm(f) - 1.0) < 1e-12

    def test_zero_coeffs_rejected(self):
        with pytest.raises(ValueError):
            realize_filter(dct_basis(3), np.zeros(9))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            realize_filter(dct_basis(3), np.ones(5))

    def test_bank_matches_single(self):
        b = dct_basis(3)
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(4, 9))
        bank = realize_filter_bank(b, rows)
        for i in range(4):
            np.testing.assert_allclose(bank[i], realize_filter(b, rows[i]), atol=1e-14)


class TestNormalizeVjp:
    def test_zero_upstream_gives_zero(self):
        b = dct_basis(3)
        g = normalize_vjp(b, np.ones(9), np.zeros((3, 3)))
        np.testing.assert_array_equal(g, np.zeros(9))

    def test_matches_finite_differences(self):
        b = dct_basis(3)
        rng = np.random.default_rng(7)
        c = rng.normal(size=9)
        upstream = rng.normal(size=(3, 3))
        analytic = normalize_vjp(b, c, upstream)
        h = 1e-6
        numeric = np.empty(9)
        for j in range(9):
            cp, cm = c.copy(), c.copy()
            cp[j] += h
            cm[j] -= h
            numeric[j] = (np.vdot(realize_filter(b, cp), upstream)
                          - np.vdot(realize_filter(b, cm), upstream)) / (2 * h)
        assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) < 1e-6

    def test_radial_component_annihilated(self):
        b = dct_basis(3)
        c = np.zeros(9)
        c[2] = 1.0
        upstream = realize_filter(b, c)  # parallel to the realized filter
        g = normalize_vjp(b, c, upstream)
        assert abs(g @ c) < 1e-12


class TestConv2Same:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 7))
        np.testing.assert_array_equal(conv2_same(x, np.ones((1, 1))), x)

    def test_zero_mean_filter_kills_constant(self):
        x = np.full((5, 5), 0.5)
        f = np.array([[1.0, -2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 2.0, -1.0]])
        assert abs(f.sum()) < 1e-15
        np.testing.assert_allclose(conv2_same(x, f), 0.0, atol=1e-12)

    def test_matches_explicit_convolution_matrix(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 8))
        f = rng.normal(size=(3, 3))
        u = conv_matrix_for_image(f, 8, 8)
        np.testing.assert_allclose(conv2_same(x, f), (u @ x.ravel()).reshape(8, 8), atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        x1, x2 = rng.normal(size=(2, 6, 6))
        f = rng.normal(size=(3, 3))
        lhs = conv2_same(2.0 * x1 - 3.0 * x2, f)
        rhs = 2.0 * conv2_same(x1, f) - 3.0 * conv2_same(x2, f)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_interior_adjoint_identity_with_reflection(self):
        # <p (x) x, z> = <x, pbar (x) z> when x, z vanish near the border
        rng = np.random.default_rng(6)
        k = 3
        x = np.zeros((10, 10))
        z = np.zeros((10, 10))
        x[k - 1:-(k - 1), k - 1:-(k - 1)] = rng.normal(size=(6, 6))
        z[k - 1:-(k - 1), k - 1:-(k - 1)] = rng.normal(size=(6, 6))
        f = rng.normal(size=(k, k))
        lhs = np.vdot(conv2_same(x, f), z)
        rhs = np.vdot(x, conv2_same(z, rot180(f)))
        assert abs(lhs - rhs) < 1e-10

    def test_exact_adjoint_full_grid(self):
        # conv2_same_adjoint is the true matrix transpose, borders included
        rng = np.random.default_rng(8)
        for padding in ("symmetric", "zero"):
            for k in (3, 5):
                x = rng.normal(size=(7, 9))
                z = rng.normal(size=(7, 9))
                f = rng.normal(size=(k, k))
                lhs = np.vdot(conv2_same(x, f, padding), z)
                rhs = np.vdot(x, conv2_same_adjoint(z, f, padding))
                assert abs(lhs - rhs) < 1e-12

    def test_bank_and_stack_match_loops(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(6, 6))
        stack = rng.normal(size=(4, 6, 6))
        filters = rng.normal(size=(4, 3, 3))
        bank = conv2_same_bank(x, filters)
        per = conv2_same_stack(stack, filters)
        adj = conv2_same_adjoint_stack(stack, filters)
        for i in range(4):
            np.testing.assert_allclose(bank[i], conv2_same(x, filters[i]), atol=1e-13)
            np.testing.assert_allclose(per[i], conv2_same(stack[i], filters[i]), atol=1e-13)
            np.testing.assert_allclose(adj[i], conv2_same_adjoint(stack[i], filters[i]), atol=1e-13)

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ValueError):
            conv2_same(np.ones((3, 3)), np.ones((9, 9)))


class TestKernelGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(7, 7))
        up = rng.normal(size=(7, 7))
        for padding in ("symmetric", "zero"):
            analytic = kernel_grad(x, up, 3, padding)
            h = 1e-6
            numeric = np.empty((3, 3))
            for a in range(3):
                for b in range(3):
                    wp = np.zeros((3, 3))
                    wp[a, b] = h
                    numeric[a, b] = (np.vdot(conv2_same(x, wp, padding), up)) / h
            np.testing.assert_allclose(analytic, numeric, atol=1e-8)

    def test_stack_matches_single(self):
        rng = np.random.default_rng(11)
        xs = rng.normal(size=(3, 6, 6))
        ups = rng.normal(size=(3, 6, 6))
        stack = kernel_grad_stack(xs, ups, 3)
        for i in range(3):
            np.testing.assert_allclose(stack[i], kernel_grad(xs[i], ups[i], 3), atol=1e-13)
        shared = kernel_grad_stack(xs[0], ups, 3)
        for i in range(3):
            np.testing.assert_allclose(shared[i], kernel_grad(xs[0], ups[i], 3), atol=1e-13)


class TestRot180:
    def test_symmetric_filter_unchanged(self):
        f = np.array([[1.0, 2.0, 1.0], [2.0, 5.0, 2.0], [1.0, 2.0, 1.0]])
        np.testing.assert_array_equal(rot180(f), f)

    def test_definition(self):
        f = np.array([[1.0, 2.0, 0.0], [3.0, 4.0, 0.0], [0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(rot180(f), f[::-1, ::-1])
        np.testing.assert_array_equal(rot180(rot180(f)), f)

    def test_conv_with_rot180_is_correlation(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(8, 8))
        f = rng.normal(size=(3, 3))
        # direct correlation oracle on the padded image
        from sfarl.grids import pad_grid
        p = pad_grid(x, 1, "symmetric")
        expected = np.empty((8, 8))
        for i in range(8):
            for j in range(8):
                expected[i, j] = np.sum(p[i:i + 3, j:j + 3] * f)
        np.testing.assert_allclose(conv2_same(x, rot180(f)), expected, atol=1e-12)


class TestConvMatrixEquivalence:
    def test_delta_kernel_gives_identity(self):
        delta = np.zeros((3, 3))
        delta[1, 1] = 1.0
        u = conv_matrix_for_image(delta, 5, 5)
        np.testing.assert_allclose(u, np.eye(25), atol=1e-15)
        assert conv_matrix_equiv_check(delta, np.random.default_rng(0).normal(size=(5, 5)))

    def test_random_instances(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            u = rng.normal(size=(3, 3))
            v = rng.normal(size=(6, 6))
            assert conv_matrix_equiv_check(u, v)

    def test_zero_image(self):
        u = np.random.default_rng(1).normal(size=(3, 3))
        v = np.zeros((4, 4))
        assert conv_matrix_equiv_check(u, v)
        np.testing.assert_array_equal(conv2_same(v, u), v)

    def test_large_instance_guarded(self):
        with pytest.raises(ValueError):
            conv_matrix_for_image(np.ones((3, 3)), 32, 32)
        with pytest.raises(ValueError):
            conv_matrix_for_kernel(np.ones((32, 32)), 3)
