"""Stage-wise restorer: parameter containers, the inference step, serialization.

One inference stage performs a learned gradient-descent update

    x_raw = x - sum_i fbar_i (x) phi_i(f_i (x) x)
              - lambda * sum_i A^T [ pbar_i (x) varphi_i(p_i (x) (A x - y)) ]

followed by projection onto the task's feasible set. lambda = exp(alpha) keeps
the fidelity weight positive; fbar/pbar are the 180-degree rotated filters.
Filters are unit-norm combinations of DCT atoms: the fidelity bank uses the
complete basis, the regularization bank excludes the constant atom.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .degrade import DegradationOp, apply, apply_adjoint
from .grids import (
    DctBasis,
    conv2_same_bank,
    conv2_same_stack,
    dct_basis,
    realize_filter_bank,
)
from .influence import RbfGeometry, make_geometry, rbf_kernel

TASKS = ("deconv", "rain", "denoise")
FEASIBLE_RULES = ("reals", "box_0_to_y")
DEFAULT_STAGES = {"deconv": 10, "rain": 5, "denoise": 5}

MODEL_MAGIC = b"SFRL"
MODEL_VERSION = 1
_TASK_CODES = {"deconv": 0, "rain": 1, "denoise": 2}
_TASK_NAMES = {v: k for k, v in _TASK_CODES.items()}


class ModelFormatError(ValueError):
    """Raised when a model stream is malformed, truncated or incompatible."""


def rule_for_task(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    return "box_0_to_y" if task == "rain" else "reals"


@dataclass
class ModelGeometry:
    """Shared filter/RBF geometry for every stage of a model."""

    filter_size: int
    n_fid: int
    n_reg: int
    fid_rbf: RbfGeometry
    reg_rbf: RbfGeometry
    padding: str = "symmetric"
    fid_basis: DctBasis = field(init=False, repr=False, compare=False)
    reg_basis: DctBasis = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = self.filter_size
        if k < 1 or k % 2 == 0:
            raise ValueError(f"filter size must be odd, got {k}")
        self.fid_basis = dct_basis(k, include_dc=True)
        self.reg_basis = dct_basis(k, include_dc=False)
        if not 1 <= self.n_fid <= self.fid_basis.count:
            raise ValueError(f"n_fid must be in [1, {self.fid_basis.count}]")
        if not 1 <= self.n_reg <= self.reg_basis.count:
            raise ValueError(f"n_reg must be in [1, {self.reg_basis.count}]")


def default_geometry(filter_size: int = 7, rbf_count: int = 63,
                     fid_radius: float = 1.0, reg_radius: float = 1.0,
                     n_fid: int | None = None, n_reg: int | None = None) -> ModelGeometry:
    """Full geometry: N_f = k^2 fidelity and N_r = k^2 - 1 regularization filters."""
    k2 = filter_size * filter_size
    return ModelGeometry(
        filter_size=filter_size,
        n_fid=k2 if n_fid is None else n_fid,
        n_reg=k2 - 1 if n_reg is None else n_reg,
        fid_rbf=make_geometry(rbf_count, fid_radius),
        reg_rbf=make_geometry(rbf_count, reg_radius),
    )


@dataclass
class StageParams:
    """Learnable parameters of one inference stage."""

    alpha: float                # trade-off is exp(alpha), always positive
    fid_coeffs: np.ndarray      # (N_f, k^2)
    fid_weights: np.ndarray     # (N_f, M)
    reg_coeffs: np.ndarray      # (N_r, k^2 - 1)
    reg_weights: np.ndarray     # (N_r, M)

    def validate(self, geom: ModelGeometry):
        k2 = geom.filter_size ** 2
        m_f, m_r = geom.fid_rbf.count, geom.reg_rbf.count
        shapes = {
            "fid_coeffs": (self.fid_coeffs, (geom.n_fid, k2)),
            "fid_weights": (self.fid_weights, (geom.n_fid, m_f)),
            "reg_coeffs": (self.reg_coeffs, (geom.n_reg, k2 - 1)),
            "reg_weights": (self.reg_weights, (geom.n_reg, m_r)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise ValueError(f"{name}: expected shape {want}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if np.any(np.linalg.norm(self.fid_coeffs, axis=1) == 0):
            raise ValueError("fidelity coefficient vectors must be nonzero")
        if np.any(np.linalg.norm(self.reg_coeffs, axis=1) == 0):
            raise ValueError("regularization coefficient vectors must be nonzero")

    def copy(self) -> "StageParams":
        return StageParams(
            alpha=float(self.alpha),
            fid_coeffs=self.fid_coeffs.copy(),
            fid_weights=self.fid_weights.copy(),
            reg_coeffs=self.reg_coeffs.copy(),
            reg_weights=self.reg_weights.copy(),
        )


@dataclass
class SfarlModel:
    geometry: ModelGeometry
    task: str
    stages: list

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.stages) < 1:
            raise ValueError("model needs at least one stage")
        for theta in self.stages:
            theta.validate(self.geometry)

    @property
    def feasible_rule(self) -> str:
        return rule_for_task(self.task)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def copy(self) -> "SfarlModel":
        return SfarlModel(geometry=self.geometry, task=self.task,
                          stages=[s.copy() for s in self.stages])


@dataclass
class StageTape:
    """Intermediates of one stage needed by the backward pass."""

    x_t: np.ndarray        # stage input
    fid_pre: np.ndarray    # (N_f, H, W): p_i (x) (A x - y)
    reg_pre: np.ndarray    # (N_r, H, W): f_i (x) x
    fid_update: np.ndarray  # sum_i A^T [pbar_i (x) varphi_i(...)], without lambda
    mask: np.ndarray       # False where the projection clamped


def project_feasible(x: np.ndarray, y: np.ndarray, rule: str):
    """Project onto the feasible set; returns (projected, not-clamped mask)."""
    if rule == "reals":
        return x, np.ones(x.shape, dtype=bool)
    if rule == "box_0_to_y":
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
        hi = np.maximum(y, 0.0)
        mask = (x >= 0.0) & (x <= hi)
        return np.clip(x, 0.0, hi), mask
    raise ValueError(f"unknown feasible rule {rule!r}")


_RBF_CHUNK_ELEMS = 8_000_000  # cap on filters*pixels*means per exp batch


def _rbf_chunk(per_filter: int, count: int) -> int:
    return max(1, _RBF_CHUNK_ELEMS // max(1, per_filter * count))


def _mixture_eval_stack(geom: RbfGeometry, pre: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """phi_i(pre[i]) for every filter i, chunked to bound the response tensor."""
    out = np.empty_like(pre)
    step = _rbf_chunk(pre[0].size, geom.count)
    for i in range(0, pre.shape[0], step):
        resp = rbf_kernel(geom, pre[i:i + step])
        out[i:i + step] = np.einsum("fhwm,fm->fhw", resp, weights[i:i + step])
    return out


def inference_step(x_t: np.ndarray, y: np.ndarray, op: DegradationOp,
                   theta: StageParams, geom: ModelGeometry,
                   rule: str = "reals"):
    """One learned descent update followed by feasible-set projection.

    Returns (x_next, tape) where the tape records everything the backward
    pass needs.
    """
    if x_t.shape != y.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {y.shape}")
    pad = geom.padding
    lam = math.exp(theta.alpha)

    p = realize_filter_bank(geom.fid_basis, theta.fid_coeffs)
    f = realize_filter_bank(geom.reg_basis, theta.reg_coeffs)

    resid = apply(op, x_t) - y
    fid_pre = conv2_same_bank(resid, p, pad)
    fid_act = _mixture_eval_stack(geom.fid_rbf, fid_pre, theta.fid_weights)
    fid_update = apply_adjoint(op, conv2_same_stack(fid_act, p[:, ::-1, ::-1], pad).sum(axis=0))

    reg_pre = conv2_same_bank(x_t, f, pad)
    reg_act = _mixture_eval_stack(geom.reg_rbf, reg_pre, theta.reg_weights)
    reg_update = conv2_same_stack(reg_act, f[:, ::-1, ::-1], pad).sum(axis=0)

    x_raw = x_t - reg_update - lam * fid_update
    x_next, mask = project_feasible(x_raw, y, rule)
    tape = StageTape(x_t=x_t, fid_pre=fid_pre, reg_pre=reg_pre,
                     fid_update=fid_update, mask=mask)
    return x_next, tape


def run_inference(model: SfarlModel, y: np.ndarray, op: DegradationOp,
                  x0: np.ndarray | None = None, record: bool = True):
    """Apply every stage in order; x0 defaults to the degraded input.

    Returns (xs, tapes): the estimates x^1..x^T and, when recording, one tape
    per stage (otherwise a list of None).
    """
    x = y.copy() if x0 is None else x0
    xs, tapes = [], []
    for theta in model.stages:
        x, tape = inference_step(x, y, op, theta, model.geometry, model.feasible_rule)
        xs.append(x)
        tapes.append(tape if record else None)
    return xs, tapes


# ---------------------------------------------------------------------------
# Model file: magic "SFRL", versioned header, little-endian float64 payload
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHBHHHHHdddd")


def _rbf_radius(geom: RbfGeometry) -> float:
    r = float(geom.means[-1])
    if abs(geom.means[0] + r) > 1e-9:
        raise ModelFormatError("only symmetric RBF mean ranges are serializable")
    return r


def serialize_model(model: SfarlModel) -> bytes:
    """Self-describing binary encoding; round-trips bit-exactly."""
    g = model.geometry
    if g.padding != "symmetric":
        raise ModelFormatError("only symmetric-padding models are serializable")
    out = [_HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, _TASK_CODES[model.task],
        g.filter_size, model.n_stages, g.n_fid, g.n_reg, g.fid_rbf.count,
        _rbf_radius(g.fid_rbf), _rbf_radius(g.reg_rbf),
        g.fid_rbf.gamma, g.reg_rbf.gamma,
    )]
    for theta in model.stages:
        out.append(struct.pack("<d", theta.alpha))
        for arr in (theta.fid_coeffs, theta.fid_weights,
                    theta.reg_coeffs, theta.reg_weights):
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_model(blob: bytes) -> SfarlModel:
    if len(blob) < _HEADER.size:
        raise ModelFormatError("truncated stream: header incomplete")
    (magic, version, task_code, k, t, n_fid, n_reg, m,
     r_fid, r_reg, g_fid, g_reg) = _HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if task_code not in _TASK_NAMES:
        raise ModelFormatError(f"unknown task code {task_code}")
    geom = ModelGeometry(
        filter_size=k, n_fid=n_fid, n_reg=n_reg,
        fid_rbf=make_geometry(m, r_fid, g_fid),
        reg_rbf=make_geometry(m, r_reg, g_reg),
    )
    k2 = k * k
    sizes = [1, n_fid * k2, n_fid * m, n_reg * (k2 - 1), n_reg * m]
    stage_bytes = 8 * sum(sizes)
    expected = _HEADER.size + t * stage_bytes
    if len(blob) != expected:
        raise ModelFormatError(
            f"stream length {len(blob)} does not match header (expected {expected})")
    stages = []
    off = _HEADER.size
    for _ in range(t):
        vals = np.frombuffer(blob, dtype="<f8", count=sum(sizes), offset=off)
        off += stage_bytes
        cuts = np.cumsum(sizes)
        stages.append(StageParams(
            alpha=float(vals[0]),
            fid_coeffs=vals[cuts[0]:cuts[1]].reshape(n_fid, k2).copy(),
            fid_weights=vals[cuts[1]:cuts[2]].reshape(n_fid, m).copy(),
            reg_coeffs=vals[cuts[2]:cuts[3]].reshape(n_reg, k2 - 1).copy(),
            reg_weights=vals[cuts[3]:cuts[4]].reshape(n_reg, m).copy(),
        ))
    return SfarlModel(geometry=geom, task=_TASK_NAMES[task_code], stages=stages)


def save_model(model: SfarlModel, path):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> SfarlModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
