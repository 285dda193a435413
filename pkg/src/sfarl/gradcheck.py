"""Finite-difference certification of every analytic gradient block.

Builds seeded toy instances (small images, tiny filter banks), runs the
analytic backward pass, and compares each block against the central-difference
oracle applied to the end-to-end scalar loss. A deliberately perturbable block
hook provides the negative control.
"""

from __future__ import annotations

import numpy as np

from .degrade import blur_op, gaussian_kernel, identity_op
from .gradients import backprop_through_stages, fd_oracle, input_grad_through_stages
from .influence import make_geometry
from .losses import SsimConfig, loss_grad, loss_value
from .model import ModelGeometry, SfarlModel, StageParams, run_inference

BLOCKS = ("alpha", "fid_coeffs", "fid_weights", "reg_coeffs", "reg_weights")

_TOY_SSIM = SsimConfig(window=8, stride=1)


def random_toy_model(seed: int, n_stages: int = 1, k: int = 3, n_fid: int = 2,
                     n_reg: int = 2, m: int = 5, task: str = "denoise") -> SfarlModel:
    rng = np.random.default_rng(seed)
    geom = ModelGeometry(filter_size=k, n_fid=n_fid, n_reg=n_reg,
                         fid_rbf=make_geometry(m, 1.0),
                         reg_rbf=make_geometry(m, 1.0))
    stages = []
    for _ in range(n_stages):
        stages.append(StageParams(
            alpha=float(rng.normal(0.0, 0.2)),
            fid_coeffs=rng.normal(0.0, 1.0, (n_fid, k * k)),
            fid_weights=rng.normal(0.0, 0.3, (n_fid, m)),
            reg_coeffs=rng.normal(0.0, 1.0, (n_reg, k * k - 1)),
            reg_weights=rng.normal(0.0, 0.3, (n_reg, m)),
        ))
    return SfarlModel(geometry=geom, task=task, stages=stages)


def _pack_stage(theta: StageParams) -> np.ndarray:
    return np.concatenate([
        np.array([theta.alpha]),
        theta.fid_coeffs.ravel(), theta.fid_weights.ravel(),
        theta.reg_coeffs.ravel(), theta.reg_weights.ravel(),
    ])


def _unpack_stage(vec: np.ndarray, template: StageParams) -> StageParams:
    sizes = [1, template.fid_coeffs.size, template.fid_weights.size,
             template.reg_coeffs.size, template.reg_weights.size]
    cuts = np.cumsum(sizes)
    return StageParams(
        alpha=float(vec[0]),
        fid_coeffs=vec[cuts[0]:cuts[1]].reshape(template.fid_coeffs.shape).copy(),
        fid_weights=vec[cuts[1]:cuts[2]].reshape(template.fid_weights.shape).copy(),
        reg_coeffs=vec[cuts[2]:cuts[3]].reshape(template.reg_coeffs.shape).copy(),
        reg_weights=vec[cuts[3]:cuts[4]].reshape(template.reg_weights.shape).copy(),
    )


def _block_slices(template: StageParams) -> dict:
    sizes = [1, template.fid_coeffs.size, template.fid_weights.size,
             template.reg_coeffs.size, template.reg_weights.size]
    cuts = np.concatenate([[0], np.cumsum(sizes)])
    return {name: slice(cuts[i], cuts[i + 1]) for i, name in enumerate(BLOCKS)}


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-10)
    return float(np.max(np.abs(analytic - numeric))) / scale


def certify_instance(seed: int, loss: str = "mse", n_stages: int = 1,
                     op_kind: str = "identity", size: int = 12,
                     h: float = 1e-6, tol: float = 1e-4,
                     perturb_block: str | None = None) -> list[dict]:
    """Check every gradient block of one seeded toy instance.

    Returns one record per (stage, block) plus one for the cross-stage input
    VJP: {"block", "stage", "rel_err", "ok"}.
    """
    rng = np.random.default_rng(seed)
    model = random_toy_model(seed, n_stages=n_stages)
    y = rng.uniform(0.0, 1.0, (size, size))
    x0 = rng.uniform(0.0, 1.0, (size, size))
    gt = rng.uniform(0.0, 1.0, (size, size))
    op = identity_op() if op_kind == "identity" else blur_op(gaussian_kernel(0.8, radius=1))

    def total_loss(m: SfarlModel) -> float:
        xs, _ = run_inference(m, y, op, x0=x0)
        return loss_value(loss, xs[-1], gt, _TOY_SSIM)

    xs, tapes = run_inference(model, y, op, x0=x0)
    e = loss_grad(loss, xs[-1], gt, _TOY_SSIM)
    grads = backprop_through_stages(tapes, model, op, y, e)
    d_x0 = input_grad_through_stages(tapes, model, op, e)

    records = []
    for t in range(n_stages):
        analytic = _pack_stage(StageParams(
            alpha=grads[t].d_alpha,
            fid_coeffs=grads[t].d_fid_coeffs, fid_weights=grads[t].d_fid_weights,
            reg_coeffs=grads[t].d_reg_coeffs, reg_weights=grads[t].d_reg_weights,
        ))

        trial = model.copy()

        def f_of_stage(vec, t=t, trial=trial):
            trial.stages[t] = _unpack_stage(vec, model.stages[t])
            return total_loss(trial)

        numeric = fd_oracle(f_of_stage, _pack_stage(model.stages[t]), h)
        for block, sl in _block_slices(model.stages[t]).items():
            a = analytic[sl]
            if perturb_block == block:
                a = a + 0.01 * (1.0 + np.abs(a))
            records.append({
                "stage": t, "block": block,
                "rel_err": _rel_err(a, numeric[sl]),
            })

    def f_of_input(vec):
        xs2, _ = run_inference(model, y, op, x0=vec.reshape(y.shape))
        return loss_value(loss, xs2[-1], gt, _TOY_SSIM)

    numeric_x0 = fd_oracle(f_of_input, x0.ravel(), h)
    a = d_x0.ravel()
    if perturb_block == "input_vjp":
        a = a + 0.01 * (1.0 + np.abs(a))
    records.append({"stage": -1, "block": "input_vjp",
                    "rel_err": _rel_err(a, numeric_x0)})

    for r in records:
        r.update(seed=seed, loss=loss, n_stages=n_stages, op=op_kind,
                 ok=bool(r["rel_err"] <= tol))
    return records


def run_certification(seeds=range(10), losses=("mse", "neg_ssim"),
                      stage_counts=(1, 3), ops=("identity", "blur"),
                      tol: float = 1e-4,
                      perturb_block: str | None = None) -> tuple[list[dict], bool]:
    """Full seeded suite; returns (records, all_ok)."""
    records = []
    for seed in seeds:
        for loss in losses:
            for n_stages in stage_counts:
                for op_kind in ops:
                    records.extend(certify_instance(
                        seed, loss=loss, n_stages=n_stages, op_kind=op_kind,
                        tol=tol, perturb_block=perturb_block))
    return records, all(r["ok"] for r in records)


def summarize(records) -> dict:
    """Worst relative error per block name."""
    worst: dict[str, float] = {}
    for r in records:
        worst[r["block"]] = max(worst.get(r["block"], 0.0), r["rel_err"])
    return worst
