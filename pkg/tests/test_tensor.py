import struct

import numpy as np
import pytest

from rnl import tensor as T
from rnl.errors import ArgumentError, DimensionError, TensorFileError


class TestFeatureClip:
    def test_fields_and_flatten(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        clip = T.FeatureClip(x)
        assert (clip.t, clip.h, clip.w, clip.c) == (2, 3, 4, 5)
        assert clip.positions == 24
        flat = clip.flatten()
        assert flat.shape == (24, 5)
        # last axis fastest: row (t*H + h)*W + w
        np.testing.assert_array_equal(flat[(1 * 3 + 2) * 4 + 3], x[1, 2, 3])
        np.testing.assert_array_equal(T.FeatureClip.unflatten(flat, (2, 3, 4)).tensor, x)

    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionError):
            T.FeatureClip(np.zeros((2, 3, 4)))

    def test_unflatten_mismatch(self):
        with pytest.raises(DimensionError):
            T.unflatten(np.zeros((10, 2)), (2, 2, 2))


class TestMatmul:
    def test_random_case_matches_flattened_product(self, rng):
        x = rng.standard_normal((2, 3, 3, 4))
        w = rng.standard_normal((4, 6))
        flat = T.matmul(T.flatten(x), w)
        np.testing.assert_allclose(T.unflatten(flat, (2, 3, 3)), T.conv1x1(x, w), rtol=1e-14)
        np.testing.assert_allclose(flat, T.flatten(x) @ w, rtol=1e-14)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
            T.matmul(np.zeros((3, 4)), np.zeros((5, 2)))

    def test_f32_storage_is_preserved(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        assert T.matmul(a, b).dtype == np.float32
        assert T.matmul(a, b.astype(np.float64)).dtype == np.float64


class TestSoftmaxRows:
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
    def test_rows_sum_to_one_with_large_logits(self, rng, dtype, tol):
        a = (rng.standard_normal((20, 30)) * 1e3).astype(dtype)
        s = T.softmax_rows(a)
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=tol)

    def test_shift_invariance(self, rng):
        a = rng.standard_normal((4, 5))
        np.testing.assert_allclose(T.softmax_rows(a), T.softmax_rows(a + 100.0), atol=1e-15)

    def test_needs_rank_two(self):
        with pytest.raises(DimensionError):
            T.softmax_rows(np.zeros(3))


class TestElementwise:
    def test_broadcast_size_one_axes(self, rng):
        a = rng.standard_normal((2, 3, 3, 4))
        b = rng.standard_normal((1, 1, 1, 4))
        np.testing.assert_array_equal(T.add(a, b), a + b)
        np.testing.assert_array_equal(T.hadamard(a, b), a * b)

    def test_broadcast_rejects_rank_mismatch(self):
        with pytest.raises(DimensionError, match="rank"):
            T.add(np.zeros((2, 3)), np.zeros(3))

    def test_broadcast_rejects_incompatible(self):
        with pytest.raises(DimensionError):
            T.broadcast_shape((2, 3), (3, 3))

    def test_relu_scale_divide(self):
        a = np.array([[-1.0, 0.0, 2.0]])
        np.testing.assert_array_equal(T.relu(a), [[0.0, 0.0, 2.0]])
        np.testing.assert_array_equal(T.scale(a, 2), 2 * a)
        np.testing.assert_array_equal(T.divide(a, 4), a / 4)

    def test_transpose2d(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(T.transpose2d(a), a.T)


class TestConv1x1AndBatchNorm:
    def test_conv1x1_is_per_position_product(self, rng):
        x = rng.standard_normal((2, 2, 2, 3))
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(5)
        out = T.conv1x1(x, w, b)
        for idx in np.ndindex(x.shape[:3]):
            np.testing.assert_allclose(out[idx], x[idx] @ w + b, rtol=1e-13)

    def test_conv1x1_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv1x1(np.zeros((1, 1, 1, 3)), np.zeros((4, 2)))

    def test_batch_norm_formula(self, rng):
        x = rng.standard_normal((2, 2, 2, 3))
        g, b, m, v = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3), rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        out = T.batch_norm_inference(x, g, b, m, v, eps=1e-5)
        np.testing.assert_allclose(out, (x - m) / np.sqrt(v + 1e-5) * g + b, rtol=1e-13)

    def test_batch_norm_negative_variance(self):
        with pytest.raises(ArgumentError):
            T.batch_norm_inference(np.zeros((1, 1, 1, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))


class TestTensorFile:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, rng, dtype):
        a = rng.standard_normal((2, 3, 4, 5)).astype(dtype)
        T.save_tensor(tmp_path / "a.rnlt", a)
        b = T.load_tensor(tmp_path / "a.rnlt")
        assert b.dtype == dtype
        np.testing.assert_array_equal(a, b)

    def test_header_layout(self, tmp_path):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        T.save_tensor(tmp_path / "a.rnlt", a)
        raw = (tmp_path / "a.rnlt").read_bytes()
        assert raw[:4] == b"RNLT"
        assert raw[4:8] == bytes([1, 0, 2, 0])
        assert struct.unpack("<2I", raw[8:16]) == (2, 3)
        assert len(raw) == 16 + 6 * 4
        assert struct.unpack("<f", raw[16 + 4 * 5:])[0] == 5.0

    def test_bad_magic(self):
        with pytest.raises(TensorFileError, match="magic"):
            T.decode_tensor(b"XXXX\x01\x01\x01\x00\x01\x00\x00\x00" + bytes(8))

    def test_truncated_payload(self, tmp_path):
        T.save_tensor(tmp_path / "a.rnlt", np.zeros((2, 2)))
        raw = (tmp_path / "a.rnlt").read_bytes()
        with pytest.raises(TensorFileError, match="size"):
            T.decode_tensor(raw[:-1])

    def test_unknown_version_and_dtype(self):
        good = b"RNLT" + bytes([1, 1, 1, 0]) + struct.pack("<I", 1) + bytes(8)
        T.decode_tensor(good)
        with pytest.raises(TensorFileError, match="version"):
            T.decode_tensor(good[:4] + bytes([2]) + good[5:])
        with pytest.raises(TensorFileError, match="dtype"):
            T.decode_tensor(good[:5] + bytes([7]) + good[6:])

    def test_missing_file(self, tmp_path):
        with pytest.raises(TensorFileError):
            T.load_tensor(tmp_path / "nope.rnlt")
