"""Cloud-image branch: stage blocks against loop/hand oracles, the encoder
dimension schedule, decoder reduction, and per-frame independence."""

import numpy as np
import pytest

import oracles
from m3s import tensor as T
from m3s.errors import ConfigError, ShapeError
from m3s.nn import seeded_rng
from m3s.tensor import Tensor, finite_difference_check
from m3s.visual import (NUM_CLASSES, ChannelExcitation,
                        CrossScaleInteractiveAttention, Encoder,
                        MultiScaleSplit, PartialAttention, PartialConv2d,
                        SCSMBlock, SCSMConfig, VisualBranch)

CFG = SCSMConfig()


def _zero_module(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


def _gelu_np(x):
    return np.vectorize(oracles.gelu_reference)(np.asarray(x, dtype=np.float64))


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax_np(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestConfig:
    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            SCSMConfig(k1=2).validate(8)

    def test_non_increasing_kernels_rejected(self):
        with pytest.raises(ConfigError):
            SCSMConfig(k1=5, k2=3).validate(8)

    def test_fractional_channel_selection_rejected(self):
        with pytest.raises(ConfigError):
            SCSMConfig(r=0.3).validate(8)   # 2.4 channels

    def test_valid_selection_count(self):
        assert SCSMConfig(r=0.25).validate(8) == 2
        assert SCSMConfig(r=1.0).validate(8) == 8


class TestMultiScaleSplit:
    def test_shapes_preserved(self):
        rng = seeded_rng(0)
        split = MultiScaleSplit(8, CFG, rng)
        x = Tensor(rng.normal(size=(1, 8, 16, 16)))
        a, b = split(x)
        assert a.shape == (1, 8, 16, 16)
        assert b.shape == (1, 8, 16, 16)

    def test_all_ones_interior_sums(self):
        # all-ones input and kernels, zero bias: every interior pixel of the
        # k-th view sums k*k ones
        rng = seeded_rng(1)
        split = MultiScaleSplit(2, CFG, rng)
        for conv in (split.dw1, split.dw2):
            conv.weight.data[...] = 1.0
            conv.bias.data[...] = 0.0
        x = Tensor(np.ones((1, 2, 16, 16)))
        a, b = split(x)
        assert np.allclose(a.numpy()[:, :, 4:-4, 4:-4], 9.0)
        assert np.allclose(b.numpy()[:, :, 4:-4, 4:-4], 25.0)

    def test_matches_loop_oracle(self):
        rng = seeded_rng(2)
        split = MultiScaleSplit(3, CFG, rng)
        x = rng.normal(size=(2, 3, 7, 7))
        a, b = split(Tensor(x))
        ref_a = oracles.conv2d_loops(x, split.dw1.weight.data,
                                     split.dw1.bias.data, pad=1, groups=3)
        ref_b = oracles.conv2d_loops(x, split.dw2.weight.data,
                                     split.dw2.bias.data, pad=4, dilation=2,
                                     groups=3)
        np.testing.assert_allclose(a.numpy(), ref_a, atol=1e-12)
        np.testing.assert_allclose(b.numpy(), ref_b, atol=1e-12)

    def test_unit_kernel_is_identity(self):
        rng = seeded_rng(3)
        split = MultiScaleSplit(4, SCSMConfig(k1=1, d1=1), rng)
        split.dw1.weight.data[...] = 1.0
        split.dw1.bias.data[...] = 0.0
        x = rng.normal(size=(1, 4, 5, 5))
        a, _ = split(Tensor(x))
        np.testing.assert_array_equal(a.numpy(), x)


class TestCrossScaleAttention:
    def test_channel_doubling_shape(self):
        rng = seeded_rng(4)
        csia = CrossScaleInteractiveAttention(4, rng)
        x1 = Tensor(rng.normal(size=(1, 4, 8, 8)))
        x2 = Tensor(rng.normal(size=(1, 4, 8, 8)))
        assert csia(x1, x2).shape == (1, 8, 8, 8)

    def test_mismatched_shapes_rejected(self):
        rng = seeded_rng(5)
        csia = CrossScaleInteractiveAttention(4, rng)
        with pytest.raises(ShapeError):
            csia(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 4, 4, 4))))

    def test_single_token_concatenates_value_paths(self):
        # softmax over one spatial token is [1], so the output is exactly
        # Cat(V1, V2)
        rng = seeded_rng(6)
        csia = CrossScaleInteractiveAttention(3, rng)
        x1 = Tensor(rng.normal(size=(2, 3, 1, 1)))
        x2 = Tensor(rng.normal(size=(2, 3, 1, 1)))
        out = csia(x1, x2).numpy()
        v1 = csia.dw_v1(x1).numpy()
        v2 = csia.dw_v2(x2).numpy()
        np.testing.assert_allclose(out, np.concatenate([v1, v2], axis=1),
                                   atol=1e-14)

    def test_two_tokens_match_hand_attention(self):
        # identity depthwise projections (center tap 1) reduce the block to
        # plain attention between the two inputs' spatial tokens
        rng = seeded_rng(7)
        c = 2
        csia = CrossScaleInteractiveAttention(c, rng)
        for conv in (csia.dw_q, csia.dw_v1, csia.dw_k, csia.dw_v2):
            conv.weight.data[...] = 0.0
            conv.weight.data[:, 0, 1, 1] = 1.0
            conv.bias.data[...] = 0.0
        x1 = rng.normal(size=(1, c, 1, 2))
        x2 = rng.normal(size=(1, c, 1, 2))
        out = csia(Tensor(x1), Tensor(x2)).numpy()
        tok1 = x1.reshape(c, 2).T          # (tokens, channels)
        tok2 = x2.reshape(c, 2).T
        ref1 = oracles.attention_reference(tok1, tok2, tok1)
        ref2 = oracles.attention_reference(tok1, tok2, tok2)
        ref = np.concatenate([ref1.T.reshape(1, c, 1, 2),
                              ref2.T.reshape(1, c, 1, 2)], axis=1)
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestChannelExcitation:
    def test_zero_lambda_annihilates(self):
        rng = seeded_rng(8)
        ce = ChannelExcitation(8, 4, CFG, rng)
        ce.lam.data[...] = 0.0
        x = Tensor(rng.normal(size=(1, 8, 4, 4)))
        np.testing.assert_array_equal(ce(x).numpy(), 0.0)

    def test_constant_input_spatially_constant_output(self):
        rng = seeded_rng(9)
        ce = ChannelExcitation(4, 2, CFG, rng)
        x = Tensor(np.full((1, 4, 4, 4), 0.7))
        out = ce(x).numpy()
        assert np.ptp(out, axis=(2, 3)).max() < 1e-12

    def test_symmetric_weights_give_equal_channel_weights(self):
        # constant MLP weights + constant input: both branch outputs are
        # channel-uniform, so every output channel sees the same gate
        rng = seeded_rng(10)
        ce = ChannelExcitation(4, 2, CFG, rng)
        for lin in (ce.scr1, ce.scr2, ce.enh1, ce.enh2):
            lin.weight.data[...] = 0.05
            lin.bias.data[...] = 0.0
        ce.reduce.weight.data[...] = 0.25
        ce.reduce.bias.data[...] = 0.0
        x = Tensor(np.full((1, 4, 3, 3), 1.5))
        out = ce(x).numpy()
        assert np.ptp(out) < 1e-12            # constant over space and channels

    def test_matches_hand_evaluation(self):
        # independent numpy walk through the decided formulas on a random
        # 2-channel 2x2 map
        rng = seeded_rng(11)
        ce = ChannelExcitation(2, 1, CFG, rng)
        x = rng.normal(size=(1, 2, 2, 2))
        out = ce(Tensor(x)).numpy()

        pooled = x.mean(axis=(2, 3))                        # (1, 2)
        h_scr = _gelu_np(pooled @ ce.scr1.weight.data + ce.scr1.bias.data)
        w_scr = _sigmoid_np(h_scr @ ce.scr2.weight.data + ce.scr2.bias.data)
        h_enh = _gelu_np(pooled @ ce.enh1.weight.data + ce.enh1.bias.data)
        w_enh = _softmax_np(h_enh @ ce.enh2.weight.data + ce.enh2.bias.data)
        x_cs = x * w_enh[:, :, None, None]
        x_cf = x * w_scr[:, :, None, None]
        cat = np.concatenate([x_cs, x_cf], axis=1) * float(ce.lam.data)
        w_red = ce.reduce.weight.data[:, :, 0, 0]           # (out, in)
        ref = np.einsum("oi,bihw->bohw", w_red, cat) + \
            ce.reduce.bias.data[None, :, None, None]
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestPartialOps:
    def test_partial_conv_full_ratio_equals_full_conv(self):
        rng = seeded_rng(12)
        pc = PartialConv2d(4, SCSMConfig(r=1.0), rng)
        x = rng.normal(size=(1, 4, 6, 6))
        ref = oracles.conv2d_loops(x, pc.conv.weight.data, pc.conv.bias.data,
                                   pad=1)
        np.testing.assert_allclose(pc(Tensor(x)).numpy(), ref, atol=1e-12)

    def test_partial_conv_passes_tail_through(self):
        rng = seeded_rng(13)
        pc = PartialConv2d(8, CFG, rng)        # selects 2 of 8 channels
        x = rng.normal(size=(1, 8, 5, 5))
        out = pc(Tensor(x)).numpy()
        np.testing.assert_array_equal(out[:, 2:], x[:, 2:])
        assert not np.allclose(out[:, :2], x[:, :2])

    def test_partial_attention_identity_single_token_passthrough(self):
        rng = seeded_rng(14)
        pa = PartialAttention(4, SCSMConfig(r=0.5), rng)
        for lin in (pa.q, pa.k, pa.v):
            lin.weight.data[...] = np.eye(2)
            lin.bias.data[...] = 0.0
        x = rng.normal(size=(1, 4, 1, 1))
        np.testing.assert_allclose(pa(Tensor(x)).numpy(), x, atol=1e-14)


class TestStageBlocks:
    def test_mspc_stage1_dimension_schedule(self):
        rng = seeded_rng(15)
        block = SCSMBlock(64, CFG, rng, attention_front=False)
        x = Tensor(seeded_rng(16).normal(size=(1, 64, 32, 32)) * 0.1)
        assert block(x).shape == (1, 128, 16, 16)

    def test_mspa_stage4_dimension_schedule(self):
        rng = seeded_rng(17)
        block = SCSMBlock(512, CFG, rng, attention_front=True)
        x = Tensor(seeded_rng(18).normal(size=(1, 512, 4, 4)) * 0.1)
        assert block(x).shape == (1, 1024, 2, 2)

    @pytest.mark.parametrize("attention_front", [False, True])
    def test_block_gradients(self, attention_front):
        rng = seeded_rng(19)
        block = SCSMBlock(8, CFG, rng, attention_front=attention_front)
        x = Tensor(seeded_rng(20).normal(size=(1, 8, 8, 8)) * 0.5)

        def loss(_params):
            y = block(x)
            return T.sum_(T.mul(y, y))

        report = finite_difference_check(loss, block.parameters(),
                                         max_coords_per_param=20, seed=21)
        assert report.passed, str(report)


class TestEncoder:
    def test_dimension_schedule_64(self):
        rng = seeded_rng(22)
        enc = Encoder(CFG, rng)
        feats = enc(Tensor(seeded_rng(23).uniform(size=(1, 3, 64, 64))))
        shapes = [f.shape for f in feats]
        assert shapes == [(1, 64, 32, 32), (1, 128, 16, 16), (1, 256, 8, 8),
                          (1, 512, 4, 4), (1, 1024, 2, 2)]

    def test_dimension_schedule_32(self):
        rng = seeded_rng(24)
        enc = Encoder(CFG, rng)
        feats = enc(Tensor(seeded_rng(25).uniform(size=(1, 3, 32, 32))))
        assert feats[-1].shape == (1, 1024, 1, 1)

    def test_indivisible_extent_rejected(self):
        rng = seeded_rng(26)
        enc = Encoder(CFG, rng)
        with pytest.raises(ShapeError):
            enc(Tensor(np.zeros((1, 3, 48, 48))))

    def test_too_few_stages_rejected(self):
        with pytest.raises(ConfigError):
            Encoder(CFG, seeded_rng(27), n_stages=1)


def _toy_branch(seed=28, **kw):
    args = dict(base=4, n_stages=2, d_model=4, n_state=2)
    args.update(kw)
    return VisualBranch(seeded_rng(seed), **args)


class TestDecoderAndBranch:
    def test_row_length_and_d1_scale(self):
        rng = seeded_rng(29)
        branch = VisualBranch(rng)       # default widths
        frames = Tensor(seeded_rng(30).uniform(size=(4, 3, 64, 64)))
        rows, seg = branch(frames, want_seg=True)
        assert rows.shape == (4, 128)
        assert seg.shape == (4, NUM_CLASSES, 64, 64)

    def test_zeroed_decoder_emits_zero_rows(self):
        branch = _toy_branch()
        _zero_module(branch.decoder)
        frames = Tensor(seeded_rng(31).uniform(size=(2, 3, 16, 16)))
        rows, _ = branch(frames)
        np.testing.assert_array_equal(rows.numpy(), 0.0)

    def test_uniform_seg_logits_sigmoid_half(self):
        branch = _toy_branch()
        _zero_module(branch.decoder)
        frames = Tensor(seeded_rng(32).uniform(size=(1, 3, 16, 16)))
        _, seg = branch(frames, want_seg=True)
        np.testing.assert_allclose(_sigmoid_np(seg.numpy()), 0.5, atol=1e-15)

    def test_identical_frames_identical_rows(self):
        branch = _toy_branch()
        one = seeded_rng(33).uniform(size=(1, 3, 16, 16))
        frames = Tensor(np.repeat(one, 3, axis=0))
        rows, _ = branch(frames)
        out = rows.numpy()
        np.testing.assert_allclose(out[1], out[0], atol=1e-12)
        np.testing.assert_allclose(out[2], out[0], atol=1e-12)

    def test_permuting_frames_permutes_rows(self):
        branch = _toy_branch()
        frames = seeded_rng(34).uniform(size=(3, 3, 16, 16))
        perm = [2, 0, 1]
        rows, _ = branch(Tensor(frames))
        rows_p, _ = branch(Tensor(frames[perm]))
        np.testing.assert_allclose(rows_p.numpy(), rows.numpy()[perm],
                                   atol=1e-12)

    def test_sequence_forward_matches_flat(self):
        branch = _toy_branch()
        frames = seeded_rng(35).uniform(size=(2, 3, 3, 16, 16))
        flat_rows, _ = branch(Tensor(frames.reshape(6, 3, 16, 16)))
        seq_rows, _ = branch.forward_sequence(Tensor(frames))
        np.testing.assert_array_equal(seq_rows.numpy(),
                                      flat_rows.numpy().reshape(2, 3, 4))

    def test_end_to_end_frame_gradients(self):
        branch = _toy_branch(seed=36)
        frames = Tensor(seeded_rng(37).uniform(size=(1, 3, 8, 8)))

        def loss(_params):
            rows, seg = branch(frames, want_seg=True)
            return T.add(T.sum_(T.mul(rows, rows)),
                         T.mean(T.mul(seg, seg)))

        report = finite_difference_check(loss, branch.parameters(),
                                         max_coords_per_param=10, seed=38)
        assert report.passed, str(report)
