from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from op_cases import OP_CASES, check_op
from xforge.engine import (
    AdamState,
    FormatError,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    apply_op,
    backward,
    infer_shape,
    load_tensors,
    no_record,
    save_tensors,
)
from xforge.engine import functional as F
from xforge.engine.checkpoint import decode_tensors, encode_tensors
from xforge.engine.ops import linear_resize_matrix


class TestTape:
    def test_records_in_order(self):
        with Tape() as tape:
            x = Tensor(np.ones((2, 3)))
            y = F.relu(x * 2.0) + x
            y.sum()
        assert tape.kinds() == ["scalar_mul", "relu", "add", "sum"]

    def test_no_record_outside_or_suspended(self):
        x = Tensor(np.ones(3))
        F.relu(x)
        with Tape() as tape:
            with no_record():
                F.relu(x)
        assert len(tape) == 0

    def test_backward_requires_scalar(self):
        with Tape() as tape:
            y = F.relu(Tensor(np.ones(3)))
        with pytest.raises(ValueError, match="scalar"):
            backward(tape, y)

    def test_backward_unknown_value(self):
        with Tape() as tape:
            Tensor(np.ones(3)).sum()
        with pytest.raises(ValueError, match="not produced"):
            backward(tape, Tensor(1.0))

    def test_unreached_values_read_as_zero(self):
        with Tape() as tape:
            a, b = Tensor(np.ones(3)), Tensor(np.ones(3))
            F.relu(b)
            loss = a.sum()
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads.of(b), np.zeros(3))
        np.testing.assert_array_equal(grads.of(a), np.ones(3))

    def test_fan_out_accumulates(self):
        with Tape() as tape:
            x = Tensor(np.array([1.0, -2.0, 3.0]))
            loss = (x * x + x).sum()
        np.testing.assert_allclose(backward(tape, loss).of(x), 2 * x.data + 1)

    def test_custom_rule_overrides(self):
        with Tape() as tape:
            x = Tensor(np.array([1.0, -1.0]))
            loss = F.relu(x).sum()
        grads = backward(tape, loss, rules={"relu": lambda entry, g: (g * 5,)})
        np.testing.assert_array_equal(grads.of(x), [5.0, 5.0])

    def test_float32_default_and_float64_shadow(self):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32
        assert Tensor(np.array([1.0])).data.dtype == np.float64
        assert F.relu(Tensor(np.array([1.0]))).data.dtype == np.float64


class TestShapes:
    def test_conv_same_padding(self):
        assert infer_shape("conv2d", (2, 3, 8, 8), (4, 3, 3, 3)) == (2, 4, 8, 8)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            infer_shape("conv2d", (2, 3, 8, 8), (4, 2, 3, 3))

    def test_transposed_conv_doubles(self):
        assert infer_shape("transposed_conv2d", (1, 4, 5, 7), (4, 1, 2, 2), stride=2) == (1, 1, 10, 14)

    def test_maxpool_odd_rejected(self):
        with pytest.raises(ShapeError):
            infer_shape("maxpool2x2", (1, 1, 5, 4))

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            apply_op("add", [Tensor(np.ones((2, 3))), Tensor(np.ones((4,)))])

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown op"):
            apply_op("nope", [Tensor(np.ones(2))])

    def test_global_avgpool(self):
        assert infer_shape("avgpool", (2, 5, 4, 4)) == (2, 5)


class TestForwardValues:
    def test_conv_matches_direct_correlation(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = F.conv2d(Tensor(x), Tensor(w)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, o, i, j] = (xp[0, :, i : i + 3, j : j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_transposed_conv_is_adjoint_of_strided_conv(self):
        # <T(x), y> == <x, T*(y)> with T* the strided correlation
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 3, 3))
        w = rng.normal(size=(2, 3, 2, 2))
        y = rng.normal(size=(1, 3, 6, 6))
        tx = F.transposed_conv2d(Tensor(x), Tensor(w), stride=2).data
        corr = np.zeros_like(x)
        for i in range(3):
            for j in range(3):
                patch = y[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                corr[0, :, i, j] = np.einsum("ockl,ckl->o", w, patch)
        assert np.isclose((tx * y).sum(), (x * corr).sum())

    def test_upsample_preserves_constants(self):
        out = F.upsample2x(Tensor(np.full((1, 1, 3, 4), 2.5))).data
        assert out.shape == (1, 1, 6, 8)
        np.testing.assert_allclose(out, 2.5)

    def test_resize_rows_sum_to_one(self):
        np.testing.assert_allclose(linear_resize_matrix(5, 17).sum(axis=1), 1.0)

    def test_log_softmax_stable(self):
        out = F.log_softmax(Tensor(np.array([[1000.0, 0.0]]))).data
        assert np.all(np.isfinite(out))

    def test_log_guarded_at_zero(self):
        assert np.isfinite(F.log(Tensor(np.zeros(2))).data).all()


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(123)
    for _ in range(5):
        assert check_op(kind, *OP_CASES[kind](rng), rng) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dense_gradient_property(seed):
    rng = np.random.default_rng(seed)
    assert check_op("dense", *OP_CASES["dense"](rng), rng) <= 1e-4


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -1.0], dtype=np.float32))
        state = AdamState(lr=0.1).init([p])
        adam_step([p], [np.array([3.0, -0.5], dtype=np.float32)], state)
        # bias-corrected first step is lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([5.0], dtype=np.float32))
        state = AdamState(lr=0.1).init([p])
        for _ in range(500):
            adam_step([p], [2 * p.data], state)
        assert abs(p.data[0]) < 1e-2

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2))
        state = AdamState().init([p])
        with pytest.raises(ValueError):
            adam_step([p], [np.zeros(3)], state)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b.w": rng.normal(size=(4, 1, 3, 3)).astype(np.float32)}
        save_tensors(tmp_path / "x.xftn", tensors)
        back = load_tensors(tmp_path / "x.xftn")
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].tobytes() == tensors[k].tobytes()
        assert encode_tensors(back) == encode_tensors(tensors)

    def test_bad_magic(self):
        buf = bytearray(encode_tensors({"a": np.zeros(2, np.float32)}))
        buf[:4] = b"NOPE"
        with pytest.raises(FormatError, match="magic"):
            decode_tensors(bytes(buf), "buf")

    def test_truncation_reports_offset(self):
        buf = encode_tensors({"a": np.zeros(8, np.float32)})
        with pytest.raises(FormatError, match="truncated at byte"):
            decode_tensors(buf[:-5], "buf")

    def test_unsupported_version(self):
        buf = bytearray(encode_tensors({"a": np.zeros(2, np.float32)}))
        buf[4] = 99
        with pytest.raises(FormatError, match="version"):
            decode_tensors(bytes(buf), "buf")
