"""Core tensor/autodiff checks: hand values, finite-difference oracles, file I/O."""

import math

import numpy as np
import pytest

from ppa import numerics as nx


class TestMatmul:
    def test_identity(self):
        a = nx.Tensor(np.eye(2))
        b = nx.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(nx.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_hand_computed(self):
        a = nx.Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = nx.Tensor([[5.0], [7.0]])
        np.testing.assert_allclose(nx.matmul(a, b).data, [[5.0], [0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nx.ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
            nx.matmul(nx.Tensor(np.zeros((3, 4))), nx.Tensor(np.zeros((5, 2))))

    def test_gradient_matches_finite_differences(self):
        rep = nx.grad_check(nx.matmul, [(3, 4), (4, 2)], seed=7)
        assert rep.passed, str(rep)

    def test_batched_gradient(self):
        rep = nx.grad_check(nx.matmul, [(2, 3, 4, 5), (2, 3, 5, 2)], seed=3)
        assert rep.passed, str(rep)


class TestSoftmax:
    def test_symmetry(self):
        out = nx.softmax(nx.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_large_inputs_stable(self):
        out = nx.softmax(nx.Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)

    def test_sums_to_one_and_jacobian(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(5).astype(np.float32)
        out = nx.softmax(nx.Tensor(x))
        assert abs(out.data.sum() - 1.0) < 1e-6
        rep = nx.grad_check(lambda t: nx.softmax(t, axis=-1), [(5,)], seed=1)
        assert rep.passed, str(rep)

    def test_sum_to_one_under_large_magnitudes(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = (rng.standard_normal((4, 6)) * 1e4).astype(np.float32)
            y = nx.softmax(nx.Tensor(x), axis=-1).data
            assert np.all(y >= 0)
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_invalid_axis(self):
        with pytest.raises(nx.ShapeError):
            nx.softmax(nx.Tensor([1.0, 2.0]), axis=3)


class TestLayerNorm:
    def test_constant_row_is_zeroed(self):
        x = nx.Tensor(np.full((1, 4), 3.0))
        g = nx.Tensor(np.ones(4))
        b = nx.Tensor(np.zeros(4))
        np.testing.assert_allclose(nx.layer_norm(x, g, b).data, 0.0, atol=1e-6)

    def test_already_normalized_row(self):
        x = nx.Tensor([[1.0, -1.0]])
        out = nx.layer_norm(x, nx.Tensor(np.ones(2)), nx.Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_pre_affine_mean_is_zero(self):
        rng = np.random.default_rng(2)
        x = nx.Tensor(rng.standard_normal((3, 16)).astype(np.float32))
        out = nx.layer_norm(x, nx.Tensor(np.ones(16)), nx.Tensor(np.zeros(16)))
        assert np.abs(out.data.mean(axis=-1)).max() <= 1e-6

    def test_gradients(self):
        rep = nx.grad_check(nx.layer_norm, [(3, 8), (8,), (8,)], seed=11)
        assert rep.passed, str(rep)


class TestCrossEntropy:
    def test_uniform_two_way(self):
        loss = nx.cross_entropy(nx.Tensor([0.0, 0.0]), 0)
        assert abs(loss.item() - math.log(2)) < 1e-6

    def test_near_certain(self):
        loss = nx.cross_entropy(nx.Tensor([10.0, -10.0]), 0)
        assert loss.item() == pytest.approx(2.061e-9, rel=0.05)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            nx.cross_entropy(nx.Tensor([0.0, 1.0]), 2)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(7).astype(np.float32)
        t = nx.Tensor(x, requires_grad=True)
        nx.cross_entropy(t, 3).backward()
        p = np.exp(x - x.max())
        p /= p.sum()
        p[3] -= 1
        np.testing.assert_allclose(t.grad, p, atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        rep = nx.grad_check(lambda t: nx.cross_entropy(t, 2), [(7,)], seed=9)
        assert rep.passed, str(rep)

    def test_rows_mean_matches_singles(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 5)).astype(np.float32)
        targets = np.array([0, 3, 1, 4])
        batched = nx.cross_entropy_rows(nx.Tensor(x), targets).item()
        singles = np.mean([nx.cross_entropy(nx.Tensor(x[i]), targets[i]).item() for i in range(4)])
        assert abs(batched - singles) < 1e-6


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(nx.l2_normalize(nx.Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-6)

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0], dtype=np.float32)
        np.testing.assert_allclose(nx.l2_normalize(nx.Tensor(v)).data, v, atol=1e-7)

    def test_output_norm_one(self):
        rng = np.random.default_rng(8)
        v = rng.standard_normal(13).astype(np.float32)
        out = nx.l2_normalize(nx.Tensor(v)).data
        assert abs(np.linalg.norm(out) - 1.0) < 1e-6

    def test_idempotent(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            v = nx.Tensor(rng.standard_normal(9).astype(np.float32) * 5)
            once = nx.l2_normalize(v).data
            twice = nx.l2_normalize(nx.Tensor(once)).data
            np.testing.assert_allclose(once, twice, atol=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(nx.DegenerateInputError):
            nx.l2_normalize(nx.Tensor([0.0, 0.0]))

    def test_gradient(self):
        rep = nx.grad_check(nx.l2_normalize, [(6,)], seed=13)
        assert rep.passed, str(rep)


class TestGradCheckHarness:
    def test_linear_layer(self):
        def linear(x, w, b):
            return nx.add(nx.matmul(x, w), b)

        rep = nx.grad_check(linear, [(2, 4), (4, 3), (3,)], seed=21)
        assert rep.passed, str(rep)

    def test_frozen_input_gets_no_gradient(self):
        x = nx.Tensor(np.ones((2, 2)), requires_grad=True)
        w = nx.Tensor(np.ones((2, 2)), requires_grad=False)
        loss = nx.reduce_sum(nx.matmul(x, w))
        loss.backward()
        assert w.grad is None
        assert x.grad is not None

    def test_report_flags_wrong_gradient(self):
        def broken(x):
            out = nx.relu(x)
            good = out._backward

            def bad():
                good()
                if x.grad is not None:
                    x.grad *= 2  # corrupt on purpose

            out._backward = bad
            return out

        rep = nx.grad_check(broken, [(5,)], seed=2, input_scale=2.0)
        assert not rep.passed


class TestAutodiffGraph:
    def test_each_op_visited_once(self):
        x = nx.Tensor(np.ones(3), requires_grad=True)
        y = nx.mul(x, x)
        z = nx.add(y, y)
        tape = nx.reduce_sum(z).backward()
        assert len(tape) == len({id(n) for n in tape})

    def test_unused_parameter_gradient_is_none(self):
        used = nx.Tensor(np.ones(2), requires_grad=True)
        unused = nx.Tensor(np.ones(2), requires_grad=True)
        nx.reduce_sum(nx.mul(used, used)).backward()
        assert unused.grad is None

    def test_reuse_accumulates(self):
        x = nx.Tensor(np.array([2.0]), requires_grad=True)
        loss = nx.reduce_sum(nx.add(nx.mul(x, x), x))  # x^2 + x
        loss.backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_no_grad_blocks_recording(self):
        x = nx.Tensor(np.ones(2), requires_grad=True)
        with nx.no_grad():
            y = nx.mul(x, x)
        assert not y.requires_grad

    def test_forward_deterministic(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((8, 8)).astype(np.float32)
        b = rng.standard_normal((8, 8)).astype(np.float32)

        def run():
            t = nx.gelu(nx.matmul(nx.Tensor(a), nx.Tensor(b)))
            return nx.softmax(t, axis=-1).data

        first = run()
        for _ in range(3):
            assert np.array_equal(first, run())


class TestFiniteDifferenceSweep:
    """Every registered op against the float64 central-difference oracle, 20 seeds."""

    OPS = {
        "add": (lambda a, b: nx.add(a, b), [(3, 4), (3, 4)]),
        "add_broadcast": (lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
        "sub": (lambda a, b: nx.sub(a, b), [(3, 4), (3, 4)]),
        "mul": (lambda a, b: nx.mul(a, b), [(2, 5), (2, 5)]),
        "scale": (lambda a: nx.scale(a, -2.5), [(4, 3)]),
        "matmul": (nx.matmul, [(3, 4), (4, 2)]),
        "matmul_shared_rhs": (nx.matmul, [(2, 3, 4), (4, 5)]),
        "reshape": (lambda a: nx.reshape(a, (2, 6)), [(3, 4)]),
        "transpose": (lambda a: nx.transpose(a, (1, 0)), [(3, 4)]),
        "concat": (lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        "sum": (lambda a: nx.reduce_sum(a, axis=1), [(3, 4)]),
        "mean": (lambda a: nx.reduce_mean(a, axis=0), [(3, 4)]),
        "gelu": (nx.gelu, [(4, 4)]),
        "softmax": (lambda a: nx.softmax(a, axis=-1), [(3, 5)]),
        "layer_norm": (nx.layer_norm, [(2, 8), (8,), (8,)]),
        "l2_normalize": (nx.l2_normalize, [(7,)]),
        "cross_entropy": (lambda a: nx.cross_entropy(a, 1), [(6,)]),
        "cross_entropy_rows": (
            lambda a: nx.cross_entropy_rows(a, np.array([0, 2, 1])),
            [(3, 4)],
        ),
        "gather_rows": (lambda a: nx.gather_rows(a, np.array([0, 2, 2])), [(4, 3)]),
        "embedding": (lambda t: nx.embedding(t, np.array([[1, 0], [2, 2]])), [(4, 5)]),
        "linear": (nx.linear, [(2, 3, 4), (4, 5), (5,)]),
        "embedding_sum": (
            lambda t1, t2: nx.embedding_sum((t1, t2), (np.array([[1, 0]]), np.array([[2, 1]]))),
            [(4, 5), (3, 5)],
        ),
        "residual_layer_norm": (nx.residual_layer_norm, [(3, 8), (3, 8), (8,), (8,)]),
        "masked_softmax": (
            lambda a: nx.masked_softmax(a, np.array([0.0, -1e9, 0.0, 0.0, 0.0], dtype=np.float32)),
            [(3, 5)],
        ),
    }

    @pytest.mark.parametrize("name", sorted(OPS))
    def test_op_gradients(self, name):
        op, shapes = self.OPS[name]
        worst = 0.0
        for seed in range(20):
            rep = nx.grad_check(op, shapes, seed=seed)
            worst = max(worst, rep.max_rel_err)
            assert rep.passed, f"{name} seed {seed}: {rep}"
        assert worst <= 1e-3

    def test_relu_away_from_kink(self):
        # relu is checked at points kept clear of the non-differentiable origin
        for seed in range(20):
            rng = np.random.default_rng(seed)
            base = (rng.standard_normal(12) + np.sign(rng.standard_normal(12)) * 0.5).astype(np.float32)

            def shifted(t):
                return nx.relu(nx.add(t, nx.Tensor(base)))

            rep = nx.grad_check(shifted, [(12,)], seed=seed, input_scale=0.05)
            assert rep.passed, f"seed {seed}: {rep}"


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "w": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(4).astype(np.float32),
        }
        path = tmp_path / "params.bin"
        nx.save_tensors(path, tensors, meta={"step": 7})
        loaded, meta = nx.load_tensors(path)
        assert meta == {"step": 7}
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])

    def test_corrupted_header_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a tensor file\n")
        with pytest.raises(nx.TensorFileError):
            nx.load_tensors(path)

    def test_truncated_blob_rejected(self, tmp_path):
        path = tmp_path / "t.bin"
        nx.save_tensors(path, {"w": np.ones((4, 4), dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(nx.TensorFileError, match="truncated"):
            nx.load_tensors(path)

    def test_bad_offset_rejected(self, tmp_path):
        path = tmp_path / "t.bin"
        nx.save_tensors(path, {"a": np.ones(2, dtype=np.float32), "b": np.ones(2, dtype=np.float32)})
        raw = path.read_bytes().replace(b"tensor b 2 2 2", b"tensor b 2 9 2")
        path.write_bytes(raw)
        with pytest.raises(nx.TensorFileError):
            nx.load_tensors(path)
