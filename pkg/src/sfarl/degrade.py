"""Degradation operators and seeded synthetic training-pair generators.

Every generator is a pure function of its inputs and a 64-bit seed. Randomness
comes exclusively from ``numpy.random.default_rng`` (PCG64), so regenerating a
sample from its recorded parameters and seed is bit-identical.

Image values live on [0, 1]. Noise levels quoted in 8-bit units elsewhere are
converted to this scale (sigma / 255) before reaching these functions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PilImage

from .grids import as_image, conv2_same, conv2_same_adjoint, rot180

KERNEL_SUM_TOL = 1e-9


@dataclass(frozen=True)
class DegradationOp:
    """Linear degradation: identity, or same-size blur with a unit-sum kernel."""

    kind: str
    kernel: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "identity":
            if self.kernel is not None:
                raise ValueError("identity op takes no kernel")
            return
        if self.kind != "blur":
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"blur kernel must be odd square, got {k.shape}")
        if np.any(k < 0):
            raise ValueError("blur kernel must be nonnegative")
        if abs(k.sum() - 1.0) > KERNEL_SUM_TOL:
            raise ValueError(f"blur kernel must sum to 1, got {k.sum()}")
        object.__setattr__(self, "kernel", k)


def identity_op() -> DegradationOp:
    return DegradationOp(kind="identity")


def blur_op(kernel) -> DegradationOp:
    return DegradationOp(kind="blur", kernel=np.asarray(kernel, dtype=np.float64))


def apply(op: DegradationOp, x: np.ndarray) -> np.ndarray:
    """Forward degradation A x (blur uses symmetric padding, same size)."""
    if op.kind == "identity":
        return x
    return conv2_same(x, op.kernel)


def apply_adjoint(op: DegradationOp, z: np.ndarray) -> np.ndarray:
    """A^T z as used in the inference step: correlation with the kernel.

    Same boundary handling as `apply`; exact on interior pixels, approximate
    in the border band (see apply_transpose for the exact operator transpose).
    """
    if op.kind == "identity":
        return z
    return conv2_same(z, rot180(op.kernel))


def apply_transpose(op: DegradationOp, z: np.ndarray) -> np.ndarray:
    """Exact matrix transpose of `apply`, including boundary folding."""
    if op.kind == "identity":
        return z
    return conv2_same_adjoint(z, op.kernel)


def apply_adjoint_transpose(op: DegradationOp, z: np.ndarray) -> np.ndarray:
    """Exact matrix transpose of `apply_adjoint`."""
    if op.kind == "identity":
        return z
    return conv2_same_adjoint(z, rot180(op.kernel))


@dataclass
class TrainingSample:
    """One degraded/ground-truth pair plus the operator handed to the restorer.

    For deconvolution with kernel error, ``op`` carries the perturbed kernel
    while the clean image was blurred with the true one. ``meta`` holds every
    generator parameter and the seed, enough to resynthesize bit-exactly.
    """

    degraded: np.ndarray
    ground_truth: np.ndarray
    op: DegradationOp
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.degraded.shape != self.ground_truth.shape:
            raise ValueError("degraded and ground truth must have equal shape")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Unit-sum isotropic Gaussian kernel."""
    if radius is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
    n = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (n / max(sigma, 1e-12)) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def make_motion_kernel(size: int, seed: int, steps: int = 120) -> np.ndarray:
    """Random motion-trajectory blur kernel (thin curved streak).

    A wandering subpixel walk is splatted bilinearly onto a size x size grid,
    lightly smoothed, and normalized to unit sum.
    """
    if size % 2 == 0 or size < 3:
        raise ValueError("kernel size must be odd and >= 3")
    rng = np.random.default_rng(seed)
    k = np.zeros((size, size))
    pos = np.array([size / 2.0, size / 2.0])
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.15, 0.35)
    for _ in range(steps):
        angle += rng.normal(0.0, 0.35)
        pos += speed * np.array([np.sin(angle), np.cos(angle)])
        pos = np.clip(pos, 0.0, size - 1.0 - 1e-9)
        r, c = pos
        r0, c0 = int(r), int(c)
        fr, fc = r - r0, c - c0
        k[r0, c0] += (1 - fr) * (1 - fc)
        k[min(r0 + 1, size - 1), c0] += fr * (1 - fc)
        k[r0, min(c0 + 1, size - 1)] += (1 - fr) * fc
        k[min(r0 + 1, size - 1), min(c0 + 1, size - 1)] += fr * fc
    k = conv2_same(k, gaussian_kernel(0.6), padding="zero")
    k = np.maximum(k, 0.0)
    return k / k.sum()


def _shift_zero_fill(grid: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Integer translation with zeros entering at the trailing edge."""
    out = np.zeros_like(grid)
    h, w = grid.shape
    sr0, sr1 = max(0, dr), min(h, h + dr)
    sc0, sc1 = max(0, dc), min(w, w + dc)
    out[sr0:sr1, sc0:sc1] = grid[sr0 - dr:sr1 - dr, sc0 - dc:sc1 - dc]
    return out


def perturb_kernel(kernel: np.ndarray, severity: float, seed: int) -> np.ndarray:
    """Simulate kernel-estimation error: shift, widen, contaminate, renormalize.

    severity in [0, 1] scales an integer shift, a Gaussian widening and an
    additive noise floor. severity 0 returns the kernel unchanged.
    """
    kernel = as_image(kernel)
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must be in [0, 1], got {severity}")
    if severity == 0.0:
        return kernel.copy()
    rng = np.random.default_rng(seed)
    # integer misalignment only engages above severity 0.5: a whole-pixel
    # shift of a thin kernel already moves ~1.0 of l1 mass on its own
    s_max = max(0, int(2.0 * severity + 0.5) - 1)
    dr, dc = (int(v) for v in rng.integers(-s_max, s_max + 1, size=2))
    out = _shift_zero_fill(kernel, dr, dc)
    sigma_b = 0.9 * severity
    out = conv2_same(out, gaussian_kernel(sigma_b), padding="zero")
    noise_scale = 0.02 * severity * float(kernel.max())
    out = out + rng.normal(0.0, noise_scale, size=out.shape)
    out = np.maximum(out, 0.0)
    total = out.sum()
    if total <= 0.0:  # pathological draw; fall back to the widened kernel
        out = conv2_same(kernel, gaussian_kernel(sigma_b), padding="zero")
        out = np.maximum(out, 0.0)
        total = out.sum()
    return out / total


# ---------------------------------------------------------------------------
# Pair generators
# ---------------------------------------------------------------------------

def synth_denoise_pair(x: np.ndarray, sigma: float, seed: int) -> TrainingSample:
    """Additive Gaussian noise with identity degradation."""
    x = as_image(x)
    rng = np.random.default_rng(seed)
    y = x + rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else x.copy()
    return TrainingSample(
        degraded=y, ground_truth=x, op=identity_op(),
        meta={"task": "denoise", "sigma": sigma, "seed": int(seed)},
    )


def synth_deconv_pair(x: np.ndarray, k_true: np.ndarray, severity: float,
                      sigma: float, seed: int) -> TrainingSample:
    """Blur with the true kernel plus noise; hand the restorer a perturbed kernel."""
    x = as_image(x)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    perturb_seed = int(rng.integers(0, 2 ** 63))
    y = conv2_same(x, k_true)
    if sigma > 0:
        y = y + rng.normal(0.0, sigma, size=x.shape)
    k_hat = perturb_kernel(k_true, severity, perturb_seed)
    return TrainingSample(
        degraded=y, ground_truth=x, op=blur_op(k_hat),
        meta={"task": "deconv", "severity": severity, "sigma": sigma, "seed": int(seed)},
    )


def _line_kernel(angle_deg: float, length: int) -> np.ndarray:
    """Bilinear splat of a unit-intensity segment of `length` steps."""
    theta = np.deg2rad(angle_deg)
    d = np.array([np.sin(theta), np.cos(theta)])
    half = (length - 1) / 2.0
    size = int(np.ceil(length * max(abs(d[0]), abs(d[1])))) | 1
    size = max(size, 3)
    k = np.zeros((size, size))
    center = (size - 1) / 2.0
    for t in np.arange(-half, half + 0.5, 1.0):
        r, c = center + t * d
        r0, c0 = int(np.floor(r)), int(np.floor(c))
        fr, fc = r - r0, c - c0
        for (rr, cc, wgt) in ((r0, c0, (1 - fr) * (1 - fc)), (r0 + 1, c0, fr * (1 - fc)),
                              (r0, c0 + 1, (1 - fr) * fc), (r0 + 1, c0 + 1, fr * fc)):
            if 0 <= rr < size and 0 <= cc < size:
                k[rr, cc] += wgt
    return k


def synth_rain_streaks(h: int, w: int, angle_deg: float, density: float,
                       length: int, seed: int) -> np.ndarray:
    """Sparse streak layer in [0, 1]: random impulses motion-blurred along an angle."""
    if not 0.0 <= angle_deg < 180.0:
        raise ValueError("angle must be in [0, 180)")
    if not 0.0 < density < 1.0:
        raise ValueError("density must be in (0, 1)")
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    impulses = (rng.random((h, w)) < density) * rng.uniform(0.25, 1.0, size=(h, w))
    # the splatted segment is centered, hence symmetric under the conv flip
    streaks = conv2_same(impulses, _line_kernel(angle_deg, length), padding="zero")
    streaks = conv2_same(streaks, gaussian_kernel(0.5, radius=1), padding="zero")
    return np.clip(streaks, 0.0, 1.0)


def composite_rain(x: np.ndarray, x_r: np.ndarray, mode: str = "screen") -> np.ndarray:
    """Combine a scene layer with a streak layer."""
    if x.shape != x_r.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_r.shape}")
    if mode == "additive":
        return np.clip(x + x_r, 0.0, 1.0)
    if mode == "screen":
        return x - x * x_r + x_r
    raise ValueError(f"unknown composite mode {mode!r}")


def synth_rain_pair(x: np.ndarray, angle_deg: float, density: float, length: int,
                    seed: int, mode: str = "screen") -> TrainingSample:
    """Rainy/clean pair; the restorer sees an identity operator."""
    x = as_image(x)
    x_r = synth_rain_streaks(x.shape[0], x.shape[1], angle_deg, density, length, seed)
    y = composite_rain(x, x_r, mode)
    return TrainingSample(
        degraded=y, ground_truth=x, op=identity_op(),
        meta={"task": "rain", "angle_deg": angle_deg, "density": density,
              "length": int(length), "mode": mode, "seed": int(seed)},
    )


def jpeg_roundtrip(x: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG encode/decode of an 8-bit grayscale rendering of x."""
    if not 1 <= quality <= 100:
        raise ValueError("jpeg quality must be in [1, 100]")
    as8 = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    PilImage.fromarray(as8, mode="L").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(PilImage.open(buf), dtype=np.float64) / 255.0


def synth_multi_degrade(x: np.ndarray, k: np.ndarray, sigma: float,
                        saturation_gain: float, jpeg_quality: int,
                        seed: int) -> TrainingSample:
    """Blur followed by saturation clipping, Gaussian noise and JPEG compression.

    The restorer is told about the blur only; saturation, noise and
    compression remain in the residual.
    """
    x = as_image(x)
    rng = np.random.default_rng(seed)
    y = saturation_gain * conv2_same(x, k)
    if sigma > 0:
        y = y + rng.normal(0.0, sigma, size=x.shape)
    y = jpeg_roundtrip(np.clip(y, 0.0, 1.0), jpeg_quality)
    return TrainingSample(
        degraded=y, ground_truth=x, op=blur_op(k),
        meta={"task": "multideg", "sigma": sigma, "gain": saturation_gain,
              "quality": int(jpeg_quality), "codec": "pillow-baseline-jpeg",
              "seed": int(seed)},
    )
