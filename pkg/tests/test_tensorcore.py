import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.signal import correlate2d

from augtransfer.tensorcore import (
    SHARPEN_MASK,
    DimensionError,
    Kernel2D,
    RngStream,
    UndefinedSimilarityError,
    conv2d_same,
    conv2d_same_adjoint,
    cosine,
    gaussian_kernel,
    l1_norm,
    load_tensor,
    save_tensor,
    sign,
    stream_id,
    tensor_from_bytes,
    tensor_to_bytes,
)


class TestKernels:
    def test_gaussian_sums_to_one_and_is_symmetric(self):
        k = gaussian_kernel(7).weights
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(k, k.T)
        np.testing.assert_allclose(k, k[::-1, ::-1])
        assert k[3, 3] == k.max()

    def test_default_sigma_is_size_over_three(self):
        np.testing.assert_allclose(gaussian_kernel(9).weights, gaussian_kernel(9, 3.0).weights)

    def test_size_one_is_identity(self):
        np.testing.assert_array_equal(gaussian_kernel(1).weights, [[1.0]])

    @pytest.mark.parametrize("size", [0, 2, 4, -3])
    def test_bad_size(self, size):
        with pytest.raises(ValueError):
            gaussian_kernel(size)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            Kernel2D(np.ones((2, 3)))

    def test_sharpen_mask(self):
        w = SHARPEN_MASK.weights
        assert w[1, 1] == 5.0
        assert np.sum(w == -0.5) == 8
        assert w.sum() == pytest.approx(1.0)


class TestConvolution:
    def test_matches_scipy_correlate(self):
        gen = np.random.default_rng(1)
        x = gen.normal(size=(2, 3, 9, 7))
        k = Kernel2D(gen.normal(size=(3, 5)))
        out = conv2d_same(x, k)
        for b in range(2):
            for c in range(3):
                ref = correlate2d(x[b, c], k.weights, mode="same", boundary="fill")
                np.testing.assert_allclose(out[b, c], ref, atol=1e-12)

    def test_identity_kernel(self):
        x = np.random.default_rng(2).normal(size=(3, 5, 5))
        np.testing.assert_array_equal(conv2d_same(x, Kernel2D.identity(3)), x)

    def test_rank_check(self):
        with pytest.raises(DimensionError):
            conv2d_same(np.zeros((4, 4)), Kernel2D.identity())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5]), st.integers(3, 8), st.integers(3, 8))
    def test_adjoint_identity(self, seed, ks, h, w):
        gen = np.random.default_rng(seed)
        k = Kernel2D(gen.normal(size=(ks, ks)))
        x, y = gen.normal(size=(2, h, w)), gen.normal(size=(2, h, w))
        lhs = np.sum(conv2d_same(x, k) * y)
        rhs = np.sum(x * conv2d_same_adjoint(y, k))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


class TestReductions:
    def test_examples(self):
        assert l1_norm(np.array([0.2, -0.2])) == pytest.approx(0.4)
        np.testing.assert_array_equal(sign(np.array([0.2, -0.2, 0.0])), [1.0, -1.0, 0.0])
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    @given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
    def test_self_cosine(self, a):
        if np.linalg.norm(a) == 0:
            with pytest.raises(UndefinedSimilarityError):
                cosine(a, a)
        else:
            assert cosine(a, a) == pytest.approx(1.0)

    def test_cosine_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cosine(np.ones(3), np.ones(4))


class TestTensorFormat:
    @settings(max_examples=40)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                      elements=st.floats(allow_nan=False, allow_infinity=True)))
    def test_round_trip(self, x):
        y = tensor_from_bytes(tensor_to_bytes(x))
        assert y.shape == x.shape
        np.testing.assert_array_equal(y, x)

    def test_layout(self):
        buf = tensor_to_bytes(np.arange(6.0).reshape(2, 3))
        assert buf[:4] == b"AUGT"
        assert struct.unpack_from("<II", buf, 4) == (1, 2)
        assert struct.unpack_from("<2Q", buf, 12) == (2, 3)
        assert struct.unpack_from("<6d", buf, 28) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
        assert len(buf) == 28 + 48

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            tensor_from_bytes(b"NOPE" + bytes(20))

    def test_truncated(self):
        buf = tensor_to_bytes(np.ones((2, 2)))
        with pytest.raises(ValueError):
            tensor_from_bytes(buf[:-8])

    def test_bad_version(self):
        buf = bytearray(tensor_to_bytes(np.ones(1)))
        buf[4] = 9
        with pytest.raises(ValueError, match="version"):
            tensor_from_bytes(bytes(buf))

    def test_file(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        save_tensor(tmp_path / "x.augt", x)
        np.testing.assert_array_equal(load_tensor(tmp_path / "x.augt"), x)


class TestRngStream:
    def test_deterministic(self):
        a = RngStream(5, 3).generator().random(4)
        b = RngStream(5, 3).generator().random(4)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(5).derive("x", 1).generator().random(4)
        b = RngStream(5).derive("x", 2).generator().random(4)
        assert not np.allclose(a, b)

    def test_derive_order_independent(self):
        s = RngStream(9)
        first = s.derive("a").generator().random()
        s.derive("b").generator().random()
        assert s.derive("a").generator().random() == first

    def test_stream_id_is_stable(self):
        assert stream_id("iter", 0) == stream_id("iter", 0)
        assert stream_id("iter", 0) != stream_id("iter", 1)
