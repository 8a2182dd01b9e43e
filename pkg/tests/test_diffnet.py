"""Tests for dsynth.diffnet.

Every primitive's gradient is checked against central finite differences in
float64 via the grad_check harness, which is itself validated first on
functions with known derivatives.
"""

import math

import numpy as np
import pytest
import torch

from dsynth import diffnet
from dsynth.diffnet import (
    OptState,
    ParamStore,
    adam_step,
    bce_loss,
    ce_loss,
    concat_channels,
    conv3,
    global_avg_pool,
    grad_check,
    leaky_relu,
    linear,
    load_checkpoint,
    maxpool3,
    save_checkpoint,
    sigmoid,
    softmax,
    upsample_nearest3,
)
from dsynth.errors import ValidationError


def t64(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


class TestGradCheckHarness:
    def test_linear_function_near_machine_precision(self):
        # linear functions have no curvature, so a generous eps leaves only
        # float64 round-off in the central difference
        point = {"x": torch.arange(1.0, 7.0) / 10.0}
        err = grad_check(lambda p: (3.0 * p["x"]).sum(), point, eps=1e-3)
        assert err < 1e-10

    def test_quadratic_at_ones(self):
        point = {"x": torch.ones(4)}
        err = grad_check(lambda p: (p["x"] ** 2).sum(), point)
        assert err < 1e-8

    def test_rejects_non_scalar_objective(self):
        with pytest.raises(ValidationError):
            grad_check(lambda p: p["x"] * 2, {"x": torch.ones(3)})


class TestConv3:
    def test_one_cubed_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = t64(rng, 2, 1, 4, 4, 4)
        w = torch.ones(1, 1, 1, 1, 1, dtype=torch.float64)
        assert torch.allclose(conv3(x, w), x)

    def test_all_ones_kernel_counts_neighbours(self):
        x = torch.ones(1, 1, 5, 5, 5, dtype=torch.float64)
        w = torch.ones(1, 1, 3, 3, 3, dtype=torch.float64)
        out = conv3(x, w, padding=1)
        assert out.shape == x.shape
        assert float(out[0, 0, 2, 2, 2]) == 27.0
        assert float(out[0, 0, 0, 0, 0]) == 8.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            n = int(rng.integers(1, 3))
            s = int(rng.integers(3, 5))
            point = {
                "x": t64(rng, n, ci, s, s, s),
                "w": t64(rng, co, ci, 3, 3, 3) * 0.3,
                "b": t64(rng, co) * 0.1,
            }
            probe = t64(rng, 1).squeeze()

            def f(p):
                out = conv3(p["x"], p["w"], p["b"], padding=1)
                return (out * torch.sin(torch.arange(out.numel(), dtype=torch.float64)).reshape(out.shape)).sum() * probe

            assert grad_check(f, point) < 1e-4

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            conv3(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 3, 3, 3, 3))

    def test_oversized_kernel_rejected(self):
        with pytest.raises(ValidationError):
            conv3(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 5, 5, 5))

    def test_bad_bias_shape_rejected(self):
        with pytest.raises(ValidationError):
            conv3(torch.zeros(1, 1, 4, 4, 4), torch.zeros(2, 1, 3, 3, 3), torch.zeros(3))


class TestMaxPool3:
    def test_constant_input_constant_output(self):
        out = maxpool3(torch.full((1, 2, 4, 4, 4), 3.5))
        assert out.shape == (1, 2, 2, 2, 2)
        assert torch.all(out == 3.5)

    def test_gradient_lands_on_the_window_maximum(self):
        x = torch.zeros(1, 1, 2, 2, 2, dtype=torch.float64)
        x[0, 0, 1, 0, 1] = 5.0
        x.requires_grad_(True)
        maxpool3(x).sum().backward()
        want = torch.zeros_like(x)
        want[0, 0, 1, 0, 1] = 1.0
        assert torch.equal(x.grad, want)

    def test_gradients_match_finite_differences_away_from_ties(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            x = t64(rng, 1, 2, 4, 4, 4) * 3.0

            def f(p):
                return (maxpool3(p["x"]) ** 2).sum()

            assert grad_check(f, {"x": x}, eps=1e-6) < 1e-4

    def test_indivisible_extent_rejected(self):
        with pytest.raises(ValidationError):
            maxpool3(torch.zeros(1, 1, 5, 4, 4))


class TestUpsampleNearest3:
    def test_factor_one_is_identity(self):
        x = torch.zeros(1, 1, 2, 2, 2)
        assert upsample_nearest3(x, 1) is x

    def test_replicates_blocks(self):
        x = torch.arange(8.0).reshape(1, 1, 2, 2, 2)
        up = upsample_nearest3(x, 2)
        assert up.shape == (1, 1, 4, 4, 4)
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    assert up[0, 0, i, j, k] == x[0, 0, i // 2, j // 2, k // 2]

    def test_maxpool_inverts_upsample_on_nonnegative_input(self):
        rng = np.random.default_rng(3)
        x = torch.from_numpy(np.abs(rng.standard_normal((2, 3, 4, 4, 4))))
        assert torch.equal(maxpool3(upsample_nearest3(x, 2)), x)

    def test_adjoint_sums_over_blocks(self):
        x = torch.ones(1, 1, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        w = torch.arange(64.0, dtype=torch.float64).reshape(1, 1, 4, 4, 4)
        (upsample_nearest3(x, 2) * w).sum().backward()
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    block = w[0, 0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * k : 2 * k + 2]
                    assert float(x.grad[0, 0, i, j, k]) == float(block.sum())

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x = t64(rng, 1, 2, 3, 3, 3)

        def f(p):
            return (upsample_nearest3(p["x"], 2) ** 3).sum()

        assert grad_check(f, {"x": x}) < 1e-4


class TestConcatChannels:
    def test_channel_counts_add_and_split_round_trips(self):
        rng = np.random.default_rng(5)
        a, b = t64(rng, 2, 3, 4, 4, 4), t64(rng, 2, 2, 4, 4, 4)
        cat = concat_channels(a, b)
        assert cat.shape[1] == 5
        assert torch.equal(cat[:, :3], a)
        assert torch.equal(cat[:, 3:], b)

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            concat_channels(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 4, 4, 5))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        point = {"a": t64(rng, 1, 2, 2, 2, 2), "b": t64(rng, 1, 1, 2, 2, 2)}

        def f(p):
            return (concat_channels(p["a"], p["b"]) ** 2).sum()

        assert grad_check(f, point) < 1e-4


class TestActivationsAndHeads:
    def test_softmax_of_zeros_is_uniform(self):
        out = softmax(torch.zeros(2, 5))
        assert torch.allclose(out, torch.full((2, 5), 0.2))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        out = softmax(t64(rng, 4, 3) * 5.0)
        assert torch.allclose(out.sum(dim=1), torch.ones(4, dtype=torch.float64))

    def test_sigmoid_at_zero(self):
        assert float(sigmoid(torch.zeros(1))) == 0.5

    def test_leaky_relu_slope(self):
        x = torch.tensor([-1.0, 2.0])
        out = leaky_relu(x)
        assert float(out[0]) == pytest.approx(-0.2)
        assert float(out[1]) == 2.0

    def test_global_avg_pool_hand_case(self):
        x = torch.arange(8.0).reshape(1, 1, 2, 2, 2)
        assert float(global_avg_pool(x)) == 3.5

    def test_linear_hand_case(self):
        x = torch.tensor([[1.0, 2.0]])
        w = torch.tensor([[3.0, 4.0], [5.0, 6.0]])
        b = torch.tensor([0.5, -0.5])
        out = linear(x, w, b)
        assert torch.allclose(out, torch.tensor([[11.5, 16.5]]))

    def test_linear_feature_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            linear(torch.zeros(1, 3), torch.zeros(2, 4))

    def test_head_chain_gradients(self):
        rng = np.random.default_rng(8)
        point = {
            "x": t64(rng, 2, 3, 2, 2, 2),
            "w": t64(rng, 4, 3) * 0.5,
            "b": t64(rng, 4) * 0.1,
        }

        def f(p):
            feats = global_avg_pool(leaky_relu(p["x"]))
            probs = softmax(linear(feats, p["w"], p["b"]))
            return (probs * torch.arange(4.0, dtype=torch.float64)).sum() + sigmoid(feats).sum()

        assert grad_check(f, point) < 1e-4


class TestLosses:
    def test_uniform_prediction_gives_log_n(self):
        for n in (2, 3, 7):
            probs = torch.full((4, n), 1.0 / n, dtype=torch.float64)
            labels = torch.arange(4) % n
            assert float(ce_loss(probs, labels)) == pytest.approx(math.log(n), rel=1e-9)

    def test_perfect_prediction_is_nearly_free(self):
        probs = torch.eye(3, dtype=torch.float64)
        labels = torch.arange(3)
        assert float(ce_loss(probs, labels)) <= 1e-6

    def test_bce_at_half_is_log_two(self):
        p = torch.full((6,), 0.5, dtype=torch.float64)
        for target in (torch.zeros(6, dtype=torch.float64), torch.ones(6, dtype=torch.float64)):
            assert float(bce_loss(p, target)) == pytest.approx(math.log(2.0), rel=1e-9)

    def test_clamping_keeps_losses_finite_at_the_corners(self):
        p = torch.tensor([0.0, 1.0], dtype=torch.float64)
        targets = torch.tensor([1.0, 0.0], dtype=torch.float64)
        val = float(bce_loss(p, targets))
        assert math.isfinite(val)
        assert val == pytest.approx(-math.log(1e-7), rel=1e-6)
        probs = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert math.isfinite(float(ce_loss(probs, torch.tensor([0]))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        raw = torch.from_numpy(rng.uniform(0.1, 0.9, size=(5, 3)))
        labels = torch.from_numpy(rng.integers(0, 3, size=5))
        err = grad_check(lambda p: ce_loss(softmax(p["z"]), labels), {"z": raw})
        assert err < 1e-4
        probs = torch.from_numpy(rng.uniform(0.2, 0.8, size=8))
        tgt = torch.from_numpy(rng.integers(0, 2, size=8).astype(np.float64))
        err = grad_check(lambda p: bce_loss(sigmoid(p["z"]), tgt), {"z": probs})
        assert err < 1e-4

    def test_shape_mismatches_rejected(self):
        with pytest.raises(ValidationError):
            bce_loss(torch.zeros(3), torch.zeros(4))
        with pytest.raises(ValidationError):
            ce_loss(torch.zeros(3, 2), torch.zeros(4))


class TestAdam:
    def make_store(self, values):
        store = ParamStore()
        for name, v in values.items():
            store.register(name, np.asarray(v, dtype=np.float32))
        return store

    def test_zero_gradient_zero_decay_leaves_parameters(self):
        store = self.make_store({"w": [1.0, -2.0]})
        store["w"].grad = torch.zeros(2)
        before = store["w"].detach().clone()
        adam_step(store, OptState(lr=0.1))
        assert torch.equal(store["w"].detach(), before)

    def test_first_step_moves_by_lr_times_sign(self):
        store = self.make_store({"w": [0.0, 0.0, 0.0]})
        g = torch.tensor([0.3, -1.7, 2.0])
        store["w"].grad = g.clone()
        adam_step(store, OptState(lr=0.05))
        got = store["w"].detach()
        want = -0.05 * torch.sign(g)
        assert torch.allclose(got, want, atol=1e-5)

    def test_quadratic_bowl_converges(self):
        store = self.make_store({"x": [1.0]})
        state = OptState(lr=1e-2)
        for _ in range(500):
            store.zero_grad()
            (store["x"] ** 2).sum().backward()
            adam_step(store, state)
        assert abs(float(store["x"].detach())) < 1e-3

    def test_missing_gradient_names_the_parameter(self):
        store = self.make_store({"w": [1.0], "orphan": [2.0]})
        store["w"].grad = torch.zeros(1)
        with pytest.raises(ValidationError, match="orphan"):
            adam_step(store, OptState(lr=0.1))

    def test_decay_skips_bias_parameters(self):
        store = self.make_store({"w": [2.0], "head.bias": [2.0]})
        for name in ("w", "head.bias"):
            store[name].grad = torch.zeros(1)
        adam_step(store, OptState(lr=0.5, weight_decay=0.1))
        assert float(store["w"].detach()) == pytest.approx(2.0 * (1.0 - 0.5 * 0.1))
        assert float(store["head.bias"].detach()) == 2.0

    def test_training_is_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(42)
            store = ParamStore()
            store.register("w", rng.standard_normal((4, 4)).astype(np.float32))
            state = OptState(lr=1e-3, weight_decay=1e-4)
            data = torch.from_numpy(rng.standard_normal((8, 4)).astype(np.float32))
            for _ in range(25):
                store.zero_grad()
                ((data @ store["w"]).sin() ** 2).sum().backward()
                adam_step(store, state)
            return store["w"].detach().numpy().copy()

        assert np.array_equal(run(), run())


class TestParamStore:
    def test_duplicate_names_rejected(self):
        store = ParamStore()
        store.register("w", np.zeros(2, dtype=np.float32))
        with pytest.raises(ValidationError):
            store.register("w", np.zeros(2, dtype=np.float32))

    def test_names_with_spaces_rejected(self):
        with pytest.raises(ValidationError):
            ParamStore().register("bad name", np.zeros(1, dtype=np.float32))

    def test_state_dict_round_trip(self):
        rng = np.random.default_rng(10)
        store = ParamStore()
        store.register("a", rng.standard_normal(3).astype(np.float32))
        store.register("b.bias", rng.standard_normal((2, 2)).astype(np.float32))
        snap = store.state_dict()
        with torch.no_grad():
            store["a"].mul_(0.0)
        store.load_state_dict(snap)
        assert np.array_equal(store["a"].detach().numpy(), snap["a"])

    def test_mismatched_state_rejected(self):
        store = ParamStore()
        store.register("a", np.zeros(2, dtype=np.float32))
        with pytest.raises(ValidationError):
            store.load_state_dict({"a": np.zeros(2, dtype=np.float32), "ghost": np.zeros(1)})
        with pytest.raises(ValidationError):
            store.load_state_dict({})


class TestInit:
    def test_fan_in_bound(self):
        rng = np.random.default_rng(11)
        w = diffnet.conv_init(rng, 8, 4, 3)
        bound = 1.0 / np.sqrt(4 * 27)
        assert w.shape == (8, 4, 3, 3, 3)
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        tensors = {
            "gen.enc.weight": rng.standard_normal((4, 1, 3, 3, 3)).astype(np.float32),
            "opt.step": np.int64(17),
            "opt.m.gen.enc.weight": rng.standard_normal(5).astype(np.float64),
        }
        p = tmp_path / "model.ckpt"
        save_checkpoint(p, tensors)
        back = load_checkpoint(p)
        assert set(back) == set(tensors)
        for k in tensors:
            assert back[k].dtype == np.asarray(tensors[k]).dtype
            assert np.array_equal(back[k], np.asarray(tensors[k]))

    def test_magic_is_first_bytes(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, {"x": np.zeros(1, dtype=np.float32)})
        assert p.read_bytes().startswith(b"DSYNCKPT1\n")

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTCKPT\n1\nx f4 1\n" + b"\x00" * 4)
        with pytest.raises(ValidationError):
            load_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "short.ckpt"
        save_checkpoint(p, {"x": np.zeros(8, dtype=np.float32)})
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ValidationError):
            load_checkpoint(p)

    def test_trailing_garbage_rejected(self, tmp_path):
        p = tmp_path / "long.ckpt"
        save_checkpoint(p, {"x": np.zeros(2, dtype=np.float32)})
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(ValidationError):
            load_checkpoint(p)

    def test_torch_tensors_accepted(self, tmp_path):
        p = tmp_path / "t.ckpt"
        save_checkpoint(p, {"w": torch.arange(3.0)})
        assert np.array_equal(load_checkpoint(p)["w"], np.arange(3.0, dtype=np.float32))
