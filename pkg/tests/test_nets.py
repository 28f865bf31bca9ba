import math

import numpy as np
import pytest

from bnsde import autodiff as ad
from bnsde.nets import DiffusionForm, DiffusionNet, DriftNet, MlpSpec, init_params

LN2 = math.log(2.0)


def mlp_oracle(blocks, prefix, x):
    """Independent dense-layer evaluation used as the reference for forward passes."""
    h = np.asarray(x, dtype=float)
    layer = 0
    while f"{prefix}w{layer}" in blocks:
        w = blocks[f"{prefix}w{layer}"]
        b = blocks[f"{prefix}b{layer}"]
        h = h @ w.T + b
        layer += 1
        if f"{prefix}w{layer}" in blocks:
            h = np.tanh(h)
    return h


class TestDriftNet:
    def test_zero_weights_give_zero_output(self):
        net = DriftNet(state_dim=3, hidden=(8,), time_input=True)
        blocks = net.init(seed=0, scale=0.0)
        params = ad.ParamSet(blocks)
        out = net.forward(params, np.array([1.0, -2.0, 3.0]), t=0.7)
        assert np.all(out.value == 0.0)

    def test_single_linear_identity_layer(self):
        net = DriftNet(state_dim=2, hidden=(), time_input=False)
        params = ad.ParamSet({"drift.w0": np.eye(2), "drift.b0": np.zeros(2)})
        out = net.forward(params, np.array([1.0, 2.0]))
        assert np.array_equal(out.value, np.array([1.0, 2.0]))

    def test_random_net_matches_matrix_algebra_oracle(self):
        rng = np.random.default_rng(42)
        net = DriftNet(state_dim=4, hidden=(7, 5), time_input=True, time_scale=2.0)
        blocks = net.init(seed=1, scale=1.0)
        params = ad.ParamSet(blocks)
        h = rng.normal(size=(6, 4))
        t = 0.8
        out = net.forward(params, h, t=t)
        x_aug = np.concatenate([h, np.full((6, 1), t / 2.0)], axis=1)
        expected = mlp_oracle(blocks, "drift.", x_aug)
        np.testing.assert_allclose(out.value, expected, rtol=1e-13)

    def test_time_independent_config_ignores_t(self):
        net = DriftNet(state_dim=2, hidden=(6,), time_input=False)
        params = ad.ParamSet(net.init(seed=3))
        h = np.array([0.3, -1.2])
        a = net.forward(params, h, t=0.0).value
        b = net.forward(params, h, t=123.0).value
        assert np.array_equal(a, b)

    def test_zero_bias_linear_layer_is_homogeneous(self):
        net = DriftNet(state_dim=3, hidden=(), time_input=False)
        rng = np.random.default_rng(9)
        params = ad.ParamSet({"drift.w0": rng.normal(size=(3, 3)), "drift.b0": np.zeros(3)})
        h = rng.normal(size=3)
        out1 = net.forward(params, h).value
        out2 = net.forward(params, 2.0 * h).value
        assert np.array_equal(out2, 2.0 * out1)

    def test_dimension_mismatch_rejected(self):
        net = DriftNet(state_dim=3, hidden=(4,))
        params = ad.ParamSet(net.init(seed=0))
        with pytest.raises(ad.ShapeError):
            net.forward(params, np.zeros(5), t=0.0)


class TestDiffusionForms:
    def test_diagonal_zero_raw_gives_log2_diagonal(self):
        net = DiffusionNet(state_dim=3, form=DiffusionForm.diagonal(3), hidden=(4,))
        params = ad.ParamSet(net.init(seed=0, scale=0.0))
        mat = net.matrix(params, np.zeros(3), t=0.0).value
        np.testing.assert_allclose(mat, LN2 * np.eye(3), atol=1e-15)

    def test_cholesky_zero_raw_d2(self):
        net = DiffusionNet(state_dim=2, form=DiffusionForm.cholesky(2), hidden=(4,))
        params = ad.ParamSet(net.init(seed=0, scale=0.0))
        mat = net.matrix(params, np.zeros(2), t=0.0).value
        np.testing.assert_allclose(mat, np.array([[LN2, 0.0], [0.0, LN2]]), atol=1e-15)
        sigma = mat @ mat.T
        assert sigma[0, 1] == 0.0 and sigma[1, 0] == 0.0

    def test_lowrank_shape_and_rank_bound(self):
        net = DiffusionNet(state_dim=3, form=DiffusionForm.lowrank(3, 1), hidden=(5,))
        params = ad.ParamSet(net.init(seed=4, scale=1.0))
        mat = net.matrix(params, np.array([0.5, -0.5, 1.0]), t=0.0).value
        assert mat.shape == (3, 1)
        sigma = mat @ mat.T
        assert np.linalg.matrix_rank(sigma, tol=1e-12) <= 1

    def test_cholesky_matrix_is_lower_triangular_with_positive_diagonal(self):
        rng = np.random.default_rng(12)
        net = DiffusionNet(state_dim=4, form=DiffusionForm.cholesky(4), hidden=(6,))
        params = ad.ParamSet(net.init(seed=5, scale=1.5))
        mat = net.matrix(params, rng.normal(size=4), t=0.3).value
        assert np.all(np.triu(mat, k=1) == 0.0)
        assert np.all(np.diag(mat) > 0.0)

    def test_cholesky_sigma_psd_random_params(self):
        # eigenvalue oracle over randomized parameters and states
        rng = np.random.default_rng(77)
        net = DiffusionNet(state_dim=3, form=DiffusionForm.cholesky(3), hidden=(8,))
        for trial in range(20):
            params = ad.ParamSet(net.init(seed=trial, scale=2.0))
            mat = net.matrix(params, rng.normal(size=3), t=float(rng.uniform())).value
            eig = np.linalg.eigvalsh(mat @ mat.T)
            assert np.all(eig >= -1e-12)

    def test_apply_matches_matrix_times_vector(self):
        rng = np.random.default_rng(8)
        for form in (DiffusionForm.diagonal(3), DiffusionForm.cholesky(3), DiffusionForm.lowrank(3, 2)):
            net = DiffusionNet(state_dim=3, form=form, hidden=(5,))
            params = ad.ParamSet(net.init(seed=2, scale=1.0))
            h = rng.normal(size=(4, 3))
            dw = rng.normal(size=(4, form.rank))
            via_apply = net.apply(params, h, 0.2, dw).value
            mat = net.matrix(params, h, 0.2).value
            expected = np.einsum("bdp,bp->bd", mat, dw)
            np.testing.assert_allclose(via_apply, expected, rtol=1e-13)

    def test_invalid_forms_rejected(self):
        with pytest.raises(ValueError):
            DiffusionForm("lowrank", 0).validate(3)
        with pytest.raises(ValueError):
            DiffusionForm.lowrank(3, 4)
        with pytest.raises(ValueError):
            DiffusionNet(state_dim=3, form=DiffusionForm("diagonal", 2))


class TestInit:
    def test_same_seed_identical(self):
        spec = MlpSpec(4, (8,), 4)
        a = init_params(spec, seed=123, scale=1.0)
        b = init_params(spec, seed=123, scale=1.0)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_zero_scale_limit(self):
        spec = MlpSpec(4, (8,), 2)
        blocks = init_params(spec, seed=0, scale=0.0)
        for k, v in blocks.items():
            assert np.all(v == 0.0)

    def test_weight_variance_matches_scale_over_fan_in(self):
        # sampling oracle: 10^4 draws per layer
        spec = MlpSpec(100, (), 100)
        scale = 0.8
        blocks = init_params(spec, seed=99, scale=scale)
        w = blocks["w0"]
        assert w.size == 10_000
        target = scale**2 / 100
        assert abs(w.var() - target) / target < 0.05

    def test_biases_start_at_zero(self):
        blocks = init_params(MlpSpec(3, (5,), 2), seed=1, scale=1.0)
        assert np.all(blocks["b0"] == 0.0)
        assert np.all(blocks["b1"] == 0.0)

    def test_gradients_flow_through_both_nets(self):
        drift = DriftNet(state_dim=2, hidden=(4,), time_input=True)
        diff = DiffusionNet(state_dim=2, form=DiffusionForm.cholesky(2), hidden=(4,), time_input=True)
        params = ad.ParamSet({**drift.init(seed=0), **diff.init(seed=1)})
        h = np.array([[0.4, -0.2]])
        dw = np.array([[0.3, 0.1]])

        def loss(p):
            step = ad.add(drift.forward(p, h, t=0.5), diff.apply(p, h, 0.5, dw))
            return ad.ssum(ad.square(step))

        assert ad.finite_diff_check(loss, params, step=1e-5) < 1e-4
