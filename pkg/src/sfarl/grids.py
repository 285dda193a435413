"""Dense 2D grid primitives: padded convolution, exact adjoints, DCT filter bases.

All convolutions here are true convolutions (the kernel is flipped). Correlation
is expressed as convolution with a 180-degree rotated kernel. Images are padded
by (k-1)/2 per side before the sliding product and the output is cropped back
to the input size, so every operation is shape preserving.

Two boundary rules are supported:

* ``"symmetric"`` (default): mirror reflection including the edge pixel, which
  keeps constant images constant and avoids dark frames.
* ``"zero"``: zero padding, under which the adjoint of convolution is plain
  correlation. Used by tests that need an exactly symmetric operator.

``conv2_same_adjoint`` is the exact matrix transpose of ``conv2_same`` for the
chosen boundary rule (reflection padding folds border contributions back into
their source pixels), so inner-product identities hold to machine precision on
the full grid, not just the interior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
PADDINGS = ("symmetric", "zero")


def as_image(x) -> np.ndarray:
    """Validate and return a 2D float64 grid."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError(f"image must be a non-empty 2D grid, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    return x


def as_filter(f) -> np.ndarray:
    """Validate and return a k x k filter grid with odd k."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != f.shape[1]:
        raise ValueError(f"filter must be square, got shape {f.shape}")
    if f.shape[0] % 2 == 0:
        raise ValueError(f"filter side must be odd, got {f.shape[0]}")
    if not np.all(np.isfinite(f)):
        raise ValueError("filter contains non-finite values")
    return f


def rot180(f: np.ndarray) -> np.ndarray:
    """Reverse a grid along both axes."""
    return np.ascontiguousarray(f[::-1, ::-1])


# ---------------------------------------------------------------------------
# Padding and its adjoint (fold)
# ---------------------------------------------------------------------------

def pad_grid(x: np.ndarray, q: int, padding: str) -> np.ndarray:
    """Pad the last two axes by q with the given boundary rule."""
    if q == 0:
        return x
    if padding not in PADDINGS:
        raise ValueError(f"unknown padding {padding!r}")
    h, w = x.shape[-2], x.shape[-1]
    if q > h or q > w:
        raise ValueError(
            f"pad width {q} exceeds grid extent {x.shape[-2:]}; filter does not fit"
        )
    out = np.zeros(x.shape[:-2] + (h + 2 * q, w + 2 * q), dtype=np.float64)
    out[..., q:-q, q:-q] = x
    if padding == "symmetric":
        # mirror including the edge: padded row m < q is source row q-1-m
        out[..., :q, q:-q] = x[..., q - 1::-1, :]
        out[..., -q:, q:-q] = x[..., :-q - 1:-1, :]
        out[..., :, :q] = out[..., :, 2 * q - 1:q - 1:-1]
        out[..., :, -q:] = out[..., :, -q - 1:-2 * q - 1:-1]
    return out


def _windows(p: np.ndarray, wh: int, ww: int) -> np.ndarray:
    """Read-only sliding (wh, ww) windows over the last two axes of p."""
    h = p.shape[-2] - wh + 1
    w = p.shape[-1] - ww + 1
    shape = p.shape[:-2] + (h, w, wh, ww)
    strides = p.strides[:-2] + p.strides[-2:] + p.strides[-2:]
    return np.lib.stride_tricks.as_strided(p, shape=shape, strides=strides, writeable=False)


def fold_grid(z: np.ndarray, q: int, padding: str) -> np.ndarray:
    """Adjoint of pad_grid: accumulate padded borders back onto their sources."""
    if q == 0:
        return z
    if padding == "zero":
        return np.ascontiguousarray(z[..., q:-q, q:-q])
    # symmetric: padded row m < q mirrors source row q-1-m, and likewise at the
    # bottom and on columns, so each border strip folds back flipped.
    out = np.ascontiguousarray(z[..., q:-q, :])
    out[..., :q, :] += z[..., q - 1::-1, :]
    out[..., -q:, :] += z[..., :-q - 1:-1, :]
    out2 = np.ascontiguousarray(out[..., :, q:-q])
    out2[..., :, :q] += out[..., :, q - 1::-1]
    out2[..., :, -q:] += out[..., :, :-q - 1:-1]
    return out2


# ---------------------------------------------------------------------------
# Same-size convolution and exact adjoints
# ---------------------------------------------------------------------------

def conv2_same(x: np.ndarray, f: np.ndarray, padding: str = "symmetric") -> np.ndarray:
    """True 2D convolution with same-size output.

    The kernel is flipped; the image is padded by (k-1)/2 per side with the
    given boundary rule and the valid region is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    k = f.shape[0]
    p = pad_grid(x, (k - 1) // 2, padding)
    win = _windows(p, k, k)
    return np.tensordot(win, f[::-1, ::-1], axes=([2, 3], [0, 1]))


def conv2_same_bank(x: np.ndarray, filters: np.ndarray, padding: str = "symmetric") -> np.ndarray:
    """Convolve one image with a stack of filters (F, k, k) -> (F, H, W)."""
    k = filters.shape[-1]
    p = pad_grid(np.asarray(x, dtype=np.float64), (k - 1) // 2, padding)
    win = _windows(p, k, k)
    out = np.tensordot(win, filters[:, ::-1, ::-1], axes=([2, 3], [1, 2]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


def conv2_same_stack(stack: np.ndarray, filters: np.ndarray, padding: str = "symmetric") -> np.ndarray:
    """Convolve stack[i] with filters[i] for each i: (F, H, W) x (F, k, k) -> (F, H, W)."""
    k = filters.shape[-1]
    p = pad_grid(np.asarray(stack, dtype=np.float64), (k - 1) // 2, padding)
    win = _windows(p, k, k)
    return np.einsum("fijab,fab->fij", win, filters[:, ::-1, ::-1])


def _zero_embed(z: np.ndarray, q: int) -> np.ndarray:
    out = np.zeros(z.shape[:-2] + (z.shape[-2] + 2 * q, z.shape[-1] + 2 * q))
    out[..., q:-q, q:-q] = z
    return out


def _full_corr(z: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Correlation of zero-embedded z with f; transpose of valid correlation."""
    k = f.shape[-1]
    win = _windows(_zero_embed(z, k - 1), k, k)
    if f.ndim == 2:
        return np.tensordot(win, f, axes=([-2, -1], [0, 1]))
    return np.einsum("fijab,fab->fij", win, f)


def conv2_same_adjoint(z: np.ndarray, f: np.ndarray, padding: str = "symmetric") -> np.ndarray:
    """Exact transpose of ``conv2_same(. , f, padding)`` applied to z."""
    z = np.asarray(z, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return fold_grid(_full_corr(z, f), (f.shape[-1] - 1) // 2, padding)


def conv2_same_adjoint_stack(stack: np.ndarray, filters: np.ndarray, padding: str = "symmetric") -> np.ndarray:
    """Per-filter exact adjoint: transpose of conv2_same_stack along each slice."""
    stack = np.asarray(stack, dtype=np.float64)
    return fold_grid(_full_corr(stack, filters), (filters.shape[-1] - 1) // 2, padding)


def kernel_grad(x: np.ndarray, upstream: np.ndarray, k: int, padding: str = "symmetric") -> np.ndarray:
    """Gradient of <conv2_same(x, w), upstream> with respect to the k x k kernel w.

    Equals the correlation of the padded input with the upstream field,
    restricted to the k x k lag window, flipped into kernel orientation.
    """
    p = pad_grid(np.asarray(x, dtype=np.float64), (k - 1) // 2, padding)
    win = _windows(p, *upstream.shape)
    vc = np.tensordot(win, upstream, axes=([2, 3], [0, 1]))
    return vc[::-1, ::-1]


def kernel_grad_stack(x_stack: np.ndarray, upstream_stack: np.ndarray, k: int,
                      padding: str = "symmetric") -> np.ndarray:
    """kernel_grad applied slice-wise: (F, H, W) x (F, H, W) -> (F, k, k).

    x_stack may also be a single (H, W) grid shared across all slices.
    """
    up = np.asarray(upstream_stack, dtype=np.float64)
    x_stack = np.asarray(x_stack, dtype=np.float64)
    if x_stack.ndim == 2:
        x_stack = np.broadcast_to(x_stack, (up.shape[0],) + x_stack.shape)
    p = pad_grid(x_stack, (k - 1) // 2, padding)
    win = _windows(p, *up.shape[-2:])
    vc = np.einsum("fabij,fij->fab", win, up)
    return vc[:, ::-1, ::-1]


# ---------------------------------------------------------------------------
# DCT basis and unit-norm filter parameterization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DctBasis:
    """Orthonormal 2D type-II DCT atoms for k x k filters.

    Atoms are ordered lexicographically by (row frequency, column frequency);
    the constant atom, when present, comes first. This ordering is part of the
    model file contract.
    """

    size: int
    atoms: np.ndarray  # (count, k, k)
    includes_dc: bool

    @property
    def count(self) -> int:
        return self.atoms.shape[0]

    def matrix(self) -> np.ndarray:
        """Basis as a (k*k, count) matrix mapping coefficients to taps."""
        return self.atoms.reshape(self.count, -1).T


def dct_basis(k: int, include_dc: bool = True) -> DctBasis:
    """Build the orthonormal 2D type-II DCT atom set of size k (odd)."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"filter side must be odd and positive, got {k}")
    n = np.arange(k)
    # 1D orthonormal DCT-II rows: row u samples cos(pi*(2a+1)*u / (2k)).
    rows = np.cos(np.pi * (2.0 * n[None, :] + 1.0) * n[:, None] / (2.0 * k))
    rows[0] *= np.sqrt(1.0 / k)
    rows[1:] *= np.sqrt(2.0 / k)
    atoms = []
    for u in range(k):
        for v in range(k):
            if not include_dc and u == 0 and v == 0:
                continue
            atoms.append(np.outer(rows[u], rows[v]))
    return DctBasis(size=k, atoms=np.array(atoms), includes_dc=include_dc)


def realize_filter(basis: DctBasis, coeffs: np.ndarray) -> np.ndarray:
    """Unit-norm filter from basis coefficients: sum_m (c_m / ||c||) * atom_m."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (basis.count,):
        raise ValueError(f"expected {basis.count} coefficients, got shape {c.shape}")
    norm = np.linalg.norm(c)
    if norm == 0.0:
        raise ValueError("coefficient vector must be nonzero")
    return np.tensordot(c / norm, basis.atoms, axes=(0, 0))


def realize_filter_bank(basis: DctBasis, coeff_rows: np.ndarray) -> np.ndarray:
    """Realize one unit-norm filter per coefficient row: (F, count) -> (F, k, k)."""
    c = np.asarray(coeff_rows, dtype=np.float64)
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("coefficient vector must be nonzero")
    return np.tensordot(c / norms, basis.atoms, axes=(1, 0))


def normalize_vjp(basis: DctBasis, coeffs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Exact Jacobian-transpose of realize_filter applied to a filter-shaped gradient.

    Returns (1/||c||) (I - u u^T) B^T vec(upstream) with u = c/||c||; the
    projection removes the radial direction that normalization annihilates.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    norm = np.linalg.norm(c)
    if norm == 0.0:
        raise ValueError("coefficient vector must be nonzero")
    bt = np.tensordot(basis.atoms, np.asarray(upstream, dtype=np.float64), axes=([1, 2], [0, 1]))
    u = c / norm
    return (bt - u * (u @ bt)) / norm


# ---------------------------------------------------------------------------
# Dense convolution matrices (small-instance oracles)
# ---------------------------------------------------------------------------

_MAX_DENSE_SIDE = 16


def conv_matrix_for_image(u: np.ndarray, h: int, w: int, padding: str = "symmetric") -> np.ndarray:
    """Dense (h*w, h*w) matrix U with U @ vec(v) = vec(conv2_same(v, u))."""
    if h > _MAX_DENSE_SIDE or w > _MAX_DENSE_SIDE:
        raise ValueError(f"dense matrix guard: image side above {_MAX_DENSE_SIDE}")
    cols = []
    basis_img = np.zeros((h, w))
    for idx in range(h * w):
        basis_img.flat[idx] = 1.0
        cols.append(conv2_same(basis_img, u, padding).ravel())
        basis_img.flat[idx] = 0.0
    return np.array(cols).T


def conv_matrix_for_kernel(v: np.ndarray, k: int, padding: str = "symmetric") -> np.ndarray:
    """Dense (h*w, k*k) matrix V with V @ vec(u) = vec(conv2_same(v, u))."""
    h, w = v.shape
    if h > _MAX_DENSE_SIDE or w > _MAX_DENSE_SIDE:
        raise ValueError(f"dense matrix guard: image side above {_MAX_DENSE_SIDE}")
    p = pad_grid(np.asarray(v, dtype=np.float64), (k - 1) // 2, padding)
    win = _windows(p, h, w)  # win[a, b, i, j] = p[a+i, b+j]
    return win[::-1, ::-1].transpose(2, 3, 0, 1).reshape(h * w, k * k)


def conv_matrix_equiv_check(u: np.ndarray, v: np.ndarray, padding: str = "symmetric",
                            tol: float = 1e-12) -> bool:
    """Check u (x) v == U @ vec(v) == V @ vec(u) elementwise on a small instance."""
    u = as_filter(u)
    v = as_image(v)
    h, w = v.shape
    direct = conv2_same(v, u, padding)
    via_u = (conv_matrix_for_image(u, h, w, padding) @ v.ravel()).reshape(h, w)
    via_v = (conv_matrix_for_kernel(v, u.shape[0], padding) @ u.ravel()).reshape(h, w)
    return bool(
        np.max(np.abs(direct - via_u)) <= tol and np.max(np.abs(direct - via_v)) <= tol
    )
