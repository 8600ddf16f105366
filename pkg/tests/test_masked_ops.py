"""Defect-free op set: value oracles, defect invariance, gradients."""

import itertools

import numpy as np
import pytest

from dfvq import Rng, Tensor, grad_check, record
from dfvq import tensor as T
from dfvq.masked import (
    DegenerateMaskError,
    MaskError,
    build_mask_pyramid,
    df_attention,
    df_conv2d,
    df_norm,
    mask_downsample,
)


def valid_subset_norm(x, m, eps):
    """Independent oracle: normalize valid entries by their own sample stats."""
    vals = x[m == 0]
    mu = vals.mean()
    sd = np.sqrt(vals.var(ddof=1))
    out = np.zeros_like(x)
    out[m == 0] = (vals - mu) / (sd + eps)
    return out


def random_mask(rng, shape, lo=0.01, hi=0.90):
    """Random binary mask leaving at least 2 valid cells."""
    while True:
        ratio = lo + (hi - lo) * rng.uniform()
        m = (rng.uniform(shape) < ratio).astype(np.float64)
        if (m == 0).sum() >= 2:
            return m


class TestDfNorm:
    def test_constant_input_zero_output(self):
        out = df_norm(Tensor([1.0, 1.0, 1.0, 1.0]), np.zeros(4), eps=1e-5)
        assert np.array_equal(out.data, np.zeros(4))

    def test_worked_example(self):
        # valid [2, 4]: mean 3, sample sd sqrt(2); defective outputs written 0
        x = Tensor([2.0, 4.0, 100.0, -50.0])  # defective values arbitrary
        m = np.array([0.0, 0.0, 1.0, 1.0])
        out = df_norm(x, m, eps=1e-12)
        assert np.allclose(out.data[:2], [-1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-9)
        assert np.array_equal(out.data[2:], [0.0, 0.0])

    def test_worked_example_internal_algebra(self):
        # (N/N_m) E[x_zf] = (4/2)*1.5 = 3 and ((N-1)/(N_m-1)) SampleVar[x'] = 3*(2/3) = 2
        x_zf = np.array([2.0, 4.0, 0.0, 0.0])
        mu = (4 / 2) * x_zf.mean()
        assert mu == 3.0
        x_fill = np.array([2.0, 4.0, mu, mu])
        var = (3 / 1) * x_fill.var(ddof=1)
        assert var == 2.0

    def test_matches_valid_subset_oracle(self):
        rng = Rng(101)
        for _ in range(60):
            h = int(rng.integers(2, 9))
            w = int(rng.integers(2, 9))
            x = rng.normal((h, w)) * 3.0 + rng.normal()
            m = random_mask(rng, (h, w))
            out = df_norm(Tensor(x), m, eps=1e-9).data
            ref = valid_subset_norm(x, m, eps=1e-9)
            denom = np.maximum(np.abs(ref), 1e-8)
            assert np.max(np.abs(out - ref) / denom) <= 1e-10

    def test_defective_values_never_read(self):
        rng = Rng(55)
        x = rng.normal((6, 6))
        m = random_mask(rng, (6, 6), 0.2, 0.5)
        base = df_norm(Tensor(x), m).data
        for _ in range(20):
            x2 = x.copy()
            x2[m == 1] = rng.normal((int((m == 1).sum()),)) * 100
            assert np.array_equal(df_norm(Tensor(x2), m).data, base)

    def test_grouped_channels(self):
        rng = Rng(77)
        x = rng.normal((2, 4, 4, 4))
        m = (rng.uniform((2, 4, 4)) < 0.3).astype(np.float64)
        out = df_norm(Tensor(x), m, eps=1e-9, groups=2).data
        # group 0 of item 0 spans channels 0..1; oracle over that slab
        slab = x[0, :2]
        slab_mask = np.broadcast_to(m[0], (2, 4, 4))
        ref = valid_subset_norm(slab, slab_mask, eps=1e-9)
        assert np.allclose(out[0, :2], ref, atol=1e-9)

    def test_degenerate_mask_raises(self):
        with pytest.raises(DegenerateMaskError):
            df_norm(Tensor([1.0, 2.0, 3.0]), np.array([0.0, 1.0, 1.0]))
        with pytest.raises(DegenerateMaskError):
            df_norm(Tensor([1.0, 2.0]), np.array([1.0, 1.0]))

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(MaskError):
            df_norm(Tensor([1.0, 2.0]), np.array([0.0, 0.5]))

    def test_gradient(self):
        rng = Rng(31)
        x = rng.normal((6, 6))
        m = random_mask(rng, (6, 6), 0.25, 0.35)
        probe = Tensor(rng.normal((6, 6)))  # valid outputs sum to 0; weight them
        assert grad_check(lambda t: df_norm(t, m) * probe, [Tensor(x)]) <= 1e-4

    def test_gradient_zero_at_defective(self):
        rng = Rng(32)
        x = Tensor(rng.normal((5, 5)))
        m = random_mask(rng, (5, 5), 0.2, 0.4)
        x.requires_grad = True
        with record() as tape:
            out = (df_norm(x, m) * Tensor(rng.normal((5, 5)))).sum()
        tape.backward(out)
        assert np.array_equal(x.grad[m == 1], np.zeros(int(m.sum())))


class TestDfConv2d:
    def test_empty_mask_equals_conv_bitwise(self):
        rng = Rng(41)
        x = rng.normal((2, 3, 8, 8))
        w = rng.normal((4, 3, 3, 3))
        b = rng.normal(4)
        m = np.zeros((2, 8, 8))
        plain = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        masked = df_conv2d(Tensor(x), m, Tensor(w), Tensor(b), 2, 1).data
        assert np.array_equal(plain, masked)

    def test_renormalization_oracle(self):
        # all-ones 3x3 input/kernel, one defective corner: 8 * (9/8) = 9
        x = Tensor(np.ones((1, 1, 3, 3)))
        m = np.zeros((1, 3, 3))
        m[0, 0, 0] = 1.0
        out = df_conv2d(x, m, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 0)
        assert out.data.reshape(()) == 9.0

    def test_fully_defective_window_outputs_bias(self):
        x = Tensor(np.ones((1, 1, 2, 2)) * 7.0)
        m = np.ones((1, 2, 2))
        out = df_conv2d(x, m, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.array([0.25])), 1, 0)
        assert out.data.reshape(()) == 0.25

    def test_direct_masked_sum_oracle(self):
        rng = Rng(43)
        x = rng.normal((1, 2, 5, 5))
        w = rng.normal((3, 2, 3, 3))
        m = random_mask(rng, (5, 5), 0.2, 0.4)[None]
        out = df_conv2d(Tensor(x), m, Tensor(w), None, 1, 0).data
        # brute force per output position
        for oy in range(3):
            for ox in range(3):
                win_m = m[0, oy : oy + 3, ox : ox + 3]
                k_valid = (win_m == 0).sum()
                acc = np.zeros(3)
                for o in range(3):
                    acc[o] = np.sum(x[0, :, oy : oy + 3, ox : ox + 3] * w[o] * (1 - win_m))
                expect = acc * (9.0 / k_valid) if k_valid else np.zeros(3)
                assert np.allclose(out[0, :, oy, ox], expect, atol=1e-10)

    def test_defect_invariance(self):
        rng = Rng(44)
        x = rng.normal((1, 2, 6, 6))
        w = rng.normal((2, 2, 3, 3))
        b = rng.normal(2)
        m = random_mask(rng, (6, 6), 0.2, 0.5)[None]
        base = df_conv2d(Tensor(x), m, Tensor(w), Tensor(b), 1, 1).data
        for _ in range(20):
            x2 = x.copy()
            x2[0, :, m[0] == 1] = rng.normal((int(m.sum()), 2)) * 50
            again = df_conv2d(Tensor(x2), m, Tensor(w), Tensor(b), 1, 1).data
            assert np.array_equal(base, again)

    def test_gradients(self):
        rng = Rng(45)
        x = Tensor(rng.normal((1, 2, 5, 5)))
        w = Tensor(rng.normal((2, 2, 3, 3)) * 0.5)
        b = Tensor(rng.normal(2) * 0.1)
        m = random_mask(rng, (5, 5), 0.2, 0.4)[None]
        err = grad_check(lambda xx, ww, bb: df_conv2d(xx, m, ww, bb, 2, 1), [x, w, b])
        assert err <= 1e-4

    def test_gradient_zero_at_defective(self):
        rng = Rng(46)
        x = Tensor(rng.normal((1, 1, 4, 4)))
        m = random_mask(rng, (4, 4), 0.2, 0.5)[None]
        w = Tensor(rng.normal((2, 1, 3, 3)))
        x.requires_grad = True
        with record() as tape:
            out = df_conv2d(x, m, w, None, 1, 1).sum()
        tape.backward(out)
        assert np.all(x.grad[0, :, m[0] == 1] == 0.0)


class TestDfAttention:
    def test_no_mask_is_standard_attention(self):
        rng = Rng(51)
        x = rng.normal((4, 6))
        out = df_attention(Tensor(x), np.zeros(4)).data
        logits = x @ x.T / np.sqrt(6)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        ref = (e / e.sum(axis=-1, keepdims=True)) @ x
        assert np.allclose(out, ref, atol=1e-12)

    def test_single_valid_key_gets_full_weight(self):
        x = np.array([[1.0, 0.0], [5.0, -3.0]])
        out = df_attention(Tensor(x), np.array([0.0, 1.0])).data
        # every query attends only to key 0
        assert np.allclose(out[0], x[0])
        assert np.allclose(out[1], x[0])

    def test_all_defective_gives_zero_vector(self):
        x = Rng(52).normal((3, 4))
        out = df_attention(Tensor(x), np.ones(3)).data
        assert np.array_equal(out, np.zeros((3, 4)))

    def test_defect_invariance_at_valid_positions(self):
        rng = Rng(53)
        x = rng.normal((2, 5, 4))
        m = np.array([[0, 1, 0, 1, 0], [1, 0, 0, 0, 1]], dtype=np.float64)
        base = df_attention(Tensor(x), m).data
        for _ in range(20):
            x2 = x.copy()
            x2[m == 1] = rng.normal((int(m.sum()), 4)) * 30
            again = df_attention(Tensor(x2), m).data
            assert np.array_equal(base[m == 0], again[m == 0])

    def test_length_mismatch_raises(self):
        with pytest.raises(MaskError):
            df_attention(Tensor(np.zeros((3, 2))), np.zeros(4))

    def test_gradient(self):
        rng = Rng(54)
        x = Tensor(rng.normal((3, 4)))
        m = np.array([0.0, 1.0, 0.0])
        probe = Tensor(rng.normal((3, 4)))
        assert grad_check(lambda t: df_attention(t, m) * probe, [x]) <= 1e-4


class TestMaskDownsample:
    def test_any_defective_rule(self):
        m = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert np.array_equal(mask_downsample(m, 2), [[1.0]])

    def test_all_clear(self):
        assert np.array_equal(mask_downsample(np.zeros((4, 4)), 2), np.zeros((2, 2)))

    def test_single_defect_footprint(self):
        m = np.zeros((4, 4))
        m[2, 2] = 1.0
        assert np.array_equal(mask_downsample(m, 2), [[0.0, 0.0], [0.0, 1.0]])

    def test_exhaustive_4x4_stride2(self):
        for bits in itertools.product([0.0, 1.0], repeat=16):
            m = np.array(bits).reshape(4, 4)
            got = mask_downsample(m, 2)
            ref = np.zeros((2, 2))
            for r in range(2):
                for c in range(2):
                    ref[r, c] = m[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].max()
            assert np.array_equal(got, ref)

    def test_indivisible_dims_raise(self):
        with pytest.raises(MaskError):
            mask_downsample(np.zeros((5, 4)), 2)

    def test_pyramid_shapes_and_rule(self):
        rng = Rng(61)
        m0 = (rng.uniform((32, 32)) < 0.3).astype(np.float64)
        pyr = build_mask_pyramid(m0, (2, 2, 2))
        assert [p.shape for p in pyr] == [(32, 32), (16, 16), (8, 8), (4, 4)]
        for a, b in zip(pyr, pyr[1:]):
            assert np.array_equal(b, mask_downsample(a, 2))


class TestNearestUpsample:
    def test_single_cell(self):
        out = T.nearest_upsample(Tensor(np.full((1, 1, 1, 1), 7.0)), 2)
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), 7.0))

    def test_block_replication(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.nearest_upsample(x, 2).data[0, 0]
        ref = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float64)
        assert np.array_equal(out, ref)

    def test_roundtrip_with_mask_downsample(self):
        rng = Rng(62)
        for _ in range(20):
            m = (rng.uniform((4, 4)) < 0.5).astype(np.float64)
            up = T.nearest_upsample(Tensor(m[None, None]), 2).data[0, 0]
            assert np.array_equal(mask_downsample(up, 2), m)
