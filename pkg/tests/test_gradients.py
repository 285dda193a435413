import numpy as np
import pytest

from sfarl.degrade import blur_op, gaussian_kernel, identity_op
from sfarl.gradcheck import certify_instance, random_toy_model, run_certification, summarize
from sfarl.gradients import (
    backprop_through_stages,
    fd_oracle,
    stage_backward,
    stage_input_vjp,
    stage_param_grads,
)
from sfarl.influence import make_geometry
from sfarl.model import ModelGeometry, SfarlModel, StageParams, inference_step, run_inference


def toy_setup(seed=0, n_stages=1, padding="symmetric", weight_scale=0.3, size=10):
    rng = np.random.default_rng(seed)
    geom = ModelGeometry(filter_size=3, n_fid=2, n_reg=2,
                         fid_rbf=make_geometry(5, 1.0), reg_rbf=make_geometry(5, 1.0),
                         padding=padding)
    stages = [StageParams(
        alpha=float(rng.normal(0, 0.2)),
        fid_coeffs=rng.normal(size=(2, 9)),
        fid_weights=rng.normal(0, weight_scale, (2, 5)),
        reg_coeffs=rng.normal(size=(2, 8)),
        reg_weights=rng.normal(0, weight_scale, (2, 5)),
    ) for _ in range(n_stages)]
    model = SfarlModel(geometry=geom, task="denoise", stages=stages)
    y = rng.uniform(size=(size, size))
    x = rng.uniform(size=(size, size))
    return model, y, x, rng


class TestFdOracle:
    def test_quadratic(self):
        p = np.array([1.0, -2.0, 0.5])
        g = fd_oracle(lambda v: 0.5 * float(v @ v), p, 1e-6)
        np.testing.assert_allclose(g, p, atol=1e-9)

    def test_linear(self):
        c = np.array([3.0, -1.0, 2.0, 0.25])
        p = np.zeros(4)
        g = fd_oracle(lambda v: float(c @ v), p, 1e-6)
        np.testing.assert_allclose(g, c, atol=1e-9)

    def test_positive_step_required(self):
        with pytest.raises(ValueError):
            fd_oracle(lambda v: 0.0, np.zeros(2), 0.0)


class TestStageParamGrads:
    def test_zero_upstream_gives_zero(self):
        model, y, x, _ = toy_setup(seed=1)
        _, tape = inference_step(x, y, identity_op(), model.stages[0], model.geometry)
        g = stage_param_grads(tape, model.stages[0], identity_op(), y,
                              np.zeros_like(y), model.geometry)
        assert g.d_alpha == 0.0
        for block in (g.d_fid_coeffs, g.d_fid_weights, g.d_reg_coeffs, g.d_reg_weights):
            np.testing.assert_array_equal(block, np.zeros_like(block))

    def test_zero_weights_zero_filter_grads_but_weight_grads_live(self):
        model, y, x, rng = toy_setup(seed=2, weight_scale=0.0)
        theta = model.stages[0]
        _, tape = inference_step(x, y, identity_op(), theta, model.geometry)
        e = rng.normal(size=y.shape)
        g = stage_param_grads(tape, theta, identity_op(), y, e, model.geometry)
        np.testing.assert_allclose(g.d_fid_coeffs, 0.0, atol=1e-15)
        np.testing.assert_allclose(g.d_reg_coeffs, 0.0, atol=1e-15)
        assert np.max(np.abs(g.d_fid_weights)) > 0
        assert np.max(np.abs(g.d_reg_weights)) > 0

    def test_linear_in_upstream(self):
        model, y, x, rng = toy_setup(seed=3)
        theta = model.stages[0]
        _, tape = inference_step(x, y, identity_op(), theta, model.geometry)
        e1 = rng.normal(size=y.shape)
        e2 = rng.normal(size=y.shape)
        ga = stage_param_grads(tape, theta, identity_op(), y, e1, model.geometry)
        gb = stage_param_grads(tape, theta, identity_op(), y, e2, model.geometry)
        gc = stage_param_grads(tape, theta, identity_op(), y, 2.0 * e1 - e2, model.geometry)
        np.testing.assert_allclose(gc.d_fid_coeffs, 2 * ga.d_fid_coeffs - gb.d_fid_coeffs,
                                   atol=1e-12)
        np.testing.assert_allclose(gc.d_reg_weights, 2 * ga.d_reg_weights - gb.d_reg_weights,
                                   atol=1e-12)
        assert abs(gc.d_alpha - (2 * ga.d_alpha - gb.d_alpha)) < 1e-12


class TestStageInputVjp:
    def test_zero_weights_is_identity(self):
        model, y, x, rng = toy_setup(seed=4, weight_scale=0.0)
        theta = model.stages[0]
        _, tape = inference_step(x, y, identity_op(), theta, model.geometry)
        e = rng.normal(size=y.shape)
        out = stage_input_vjp(tape, theta, identity_op(), e, model.geometry)
        np.testing.assert_allclose(out, e, atol=1e-15)

    def test_zero_upstream(self):
        model, y, x, _ = toy_setup(seed=5)
        theta = model.stages[0]
        _, tape = inference_step(x, y, identity_op(), theta, model.geometry)
        out = stage_input_vjp(tape, theta, identity_op(), np.zeros_like(y), model.geometry)
        np.testing.assert_array_equal(out, np.zeros_like(y))

    def test_combined_backward_agrees_with_standalone_vjp(self):
        model, y, x, rng = toy_setup(seed=11)
        theta = model.stages[0]
        op = blur_op(gaussian_kernel(0.8, radius=1))
        _, tape = inference_step(x, y, op, theta, model.geometry)
        e = rng.normal(size=y.shape)
        _, e_prev = stage_backward(tape, theta, op, y, e, model.geometry)
        standalone = stage_input_vjp(tape, theta, op, e, model.geometry)
        np.testing.assert_allclose(e_prev, standalone, atol=1e-12)

    def test_matches_fd_jacobian_column(self):
        model, y, x, rng = toy_setup(seed=6)
        theta = model.stages[0]
        op = blur_op(gaussian_kernel(0.8, radius=1))
        _, tape = inference_step(x, y, op, theta, model.geometry)
        e = rng.normal(size=y.shape)

        def contracted(xvec):
            out, _ = inference_step(xvec.reshape(y.shape), y, op, theta, model.geometry)
            return float(np.vdot(out, e))

        numeric = fd_oracle(contracted, x.ravel(), 1e-6)
        analytic = stage_input_vjp(tape, theta, op, e, model.geometry).ravel()
        rel = np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric))
        assert rel < 1e-6


class TestDenseJacobianSymmetry:
    def test_vjp_squared_matches_dense_column(self):
        # with zero padding and identity op the stage Jacobian is symmetric;
        # applying the vjp twice must reproduce columns of the dense square
        model, y, x, _ = toy_setup(seed=7, padding="zero", size=6)
        theta = model.stages[0]
        _, tape = inference_step(x, y, identity_op(), theta, model.geometry)
        n = y.size
        dense = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            dense[:, j] = stage_input_vjp(tape, theta, identity_op(),
                                          e.reshape(y.shape), model.geometry).ravel()
        np.testing.assert_allclose(dense, dense.T, atol=1e-10)
        squared = dense @ dense
        for j in (0, 7, 21, 35):
            e = np.zeros(n)
            e[j] = 1.0
            once = stage_input_vjp(tape, theta, identity_op(),
                                   e.reshape(y.shape), model.geometry)
            twice = stage_input_vjp(tape, theta, identity_op(), once, model.geometry)
            np.testing.assert_allclose(twice.ravel(), squared[:, j], atol=1e-10)


class TestBackpropThroughStages:
    def test_single_stage_equals_direct_grads(self):
        model, y, x, rng = toy_setup(seed=8)
        op = identity_op()
        xs, tapes = run_inference(model, y, op, x0=x)
        e = rng.normal(size=y.shape)
        via_chain = backprop_through_stages(tapes, model, op, y, e)
        direct = stage_param_grads(tapes[0], model.stages[0], op, y,
                                   np.where(tapes[0].mask, e, 0.0), model.geometry)
        assert len(via_chain) == 1
        np.testing.assert_array_equal(via_chain[0].d_fid_coeffs, direct.d_fid_coeffs)
        np.testing.assert_array_equal(via_chain[0].d_reg_weights, direct.d_reg_weights)

    def test_zero_loss_grad(self):
        model, y, x, _ = toy_setup(seed=9, n_stages=3)
        xs, tapes = run_inference(model, y, identity_op(), x0=x)
        grads = backprop_through_stages(tapes, model, identity_op(), y, np.zeros_like(y))
        for g in grads:
            assert g.d_alpha == 0.0
            np.testing.assert_array_equal(g.d_fid_weights, np.zeros_like(g.d_fid_weights))

    def test_tape_count_checked(self):
        model, y, x, _ = toy_setup(seed=10, n_stages=2)
        xs, tapes = run_inference(model, y, identity_op(), x0=x)
        with pytest.raises(ValueError):
            backprop_through_stages(tapes[:1], model, identity_op(), y, np.zeros_like(y))


class TestCertification:
    @pytest.mark.parametrize("loss", ["mse", "neg_ssim"])
    @pytest.mark.parametrize("n_stages", [1, 3])
    def test_blocks_match_fd(self, loss, n_stages):
        records = certify_instance(0, loss=loss, n_stages=n_stages, op_kind="blur")
        worst = summarize(records)
        for block, rel in worst.items():
            assert rel <= 1e-4, f"{block}: {rel}"

    def test_negative_control_names_block(self):
        records = certify_instance(0, loss="mse", n_stages=1, op_kind="identity",
                                   perturb_block="fid_weights")
        bad = [r for r in records if not r["ok"]]
        assert bad and all(r["block"] == "fid_weights" for r in bad)

    def test_multi_seed_short_suite(self):
        records, ok = run_certification(seeds=range(3), losses=("mse",),
                                        stage_counts=(1,), ops=("identity",))
        assert ok
