"""State-space fusion: discretization against hand/oracle values, the scan
against a raw-parameter loop oracle, C-swap wiring, alignment, and the
causal decoder."""

import numpy as np
import pytest

import oracles
from m3s import tensor as T
from m3s.errors import ContractError
from m3s.fusion import (ConcatFusion, CrossModalFusionBlock, ForecastDecoder,
                        ScanFusion, SelectiveSSMBlock, TemporalOnlyFusion,
                        align_lengths, selective_scan, ssm_discretize)
from m3s.nn import seeded_rng
from m3s.tensor import Tensor, finite_difference_check


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus_np(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _param_gen_np(p, x):
    """Numpy re-derivation of SSMParamGen.generate on a (1, L, D) input."""
    xn = oracles.layer_norm_reference(x, p.norm.gain.data, p.norm.bias.data)
    xz = xn @ p.in_proj.weight.data + p.in_proj.bias.data
    d = x.shape[-1]
    inner, gate = xz[..., :d], xz[..., d:]
    bk = inner @ p.b_proj.weight.data + p.b_proj.bias.data
    ck = inner @ p.c_proj.weight.data + p.c_proj.bias.data
    delta = _softplus_np(inner @ p.delta_proj.weight.data
                         + p.delta_proj.bias.data)
    return inner, gate, bk, ck, delta


class TestDiscretization:
    def test_zero_step(self):
        a = Tensor(np.array([-1.0, -2.0]))
        b = Tensor(np.ones((1, 2)))
        delta = Tensor(np.zeros((1, 1)))
        a_bar, b_bar = ssm_discretize(a, b, delta)
        np.testing.assert_array_equal(a_bar.numpy(), 1.0)
        np.testing.assert_array_equal(b_bar.numpy(), 0.0)

    def test_hand_value_ln2(self):
        a = Tensor(np.array([-1.0]))
        b = Tensor(np.array([[3.0]]))
        delta = Tensor(np.array([[np.log(2.0)]]))
        a_bar, b_bar = ssm_discretize(a, b, delta)
        np.testing.assert_allclose(a_bar.numpy(), 0.5, atol=1e-15)
        np.testing.assert_allclose(b_bar.numpy(), 1.5, atol=1e-15)

    def test_matches_scalar_oracle(self):
        rng = seeded_rng(0)
        a_np = -np.exp(rng.normal(size=4))
        b_np = rng.normal(size=(5, 4))
        d_np = _softplus_np(rng.normal(size=(5, 1)))
        a_bar, b_bar = ssm_discretize(Tensor(a_np), Tensor(b_np), Tensor(d_np))
        for k in range(5):
            for n in range(4):
                ra, rb = oracles.zoh_reference(a_np[n], b_np[k, n], d_np[k, 0])
                np.testing.assert_allclose(a_bar.numpy()[k, n], ra, atol=1e-14)
                np.testing.assert_allclose(b_bar.numpy()[k, n], rb, atol=1e-14)

    def test_decay_strictly_inside_unit_interval(self):
        rng = seeded_rng(1)
        a = Tensor(-np.exp(rng.normal(size=6)))
        delta = Tensor(_softplus_np(rng.normal(size=(8, 1))) + 1e-3)
        a_bar, _ = ssm_discretize(a, Tensor(rng.normal(size=(8, 6))), delta)
        vals = a_bar.numpy()
        assert (vals > 0).all() and (vals < 1).all()

    def test_vanishing_a_takes_delta_limit(self):
        a = Tensor(np.array([-1e-15, -1.0]))
        b = Tensor(np.array([[2.0, 2.0]]))
        delta = Tensor(np.array([[0.5]]))
        _, b_bar = ssm_discretize(a, b, delta)
        np.testing.assert_array_equal(b_bar.numpy()[0, 0], 1.0)   # delta * b
        # just above the guard the smooth formula should sit next to the limit
        a2 = Tensor(np.array([-1e-9, -1.0]))
        _, b_bar2 = ssm_discretize(a2, b, delta)
        np.testing.assert_allclose(b_bar2.numpy()[0, 0], 1.0, atol=1e-8)


class TestSelectiveScan:
    def test_matches_raw_oracle_sweep(self):
        rng = seeded_rng(2)
        for _ in range(40):
            length = int(rng.integers(1, 65))
            n = int(rng.integers(1, 9))
            d = int(rng.integers(1, 6))
            x = rng.normal(size=(1, length, d))
            a_log = rng.normal(size=n)
            bk = rng.normal(size=(1, length, n))
            ck = rng.normal(size=(1, length, n))
            delta = _softplus_np(rng.normal(size=(1, length, 1)))
            d_skip = rng.normal(size=d)
            y = selective_scan(Tensor(x), Tensor(a_log), Tensor(bk),
                               Tensor(ck), Tensor(delta), Tensor(d_skip))
            ref = oracles.selective_scan_raw_reference(
                -np.exp(a_log), bk[0], ck[0], delta[0, :, 0], d_skip, x[0])
            np.testing.assert_allclose(y.numpy()[0], ref, atol=1e-12,
                                       rtol=1e-12)

    def test_batched_equals_per_sample(self):
        rng = seeded_rng(3)
        x = rng.normal(size=(3, 7, 4))
        a_log = rng.normal(size=5)
        bk = rng.normal(size=(3, 7, 5))
        ck = rng.normal(size=(3, 7, 5))
        delta = _softplus_np(rng.normal(size=(3, 7, 1)))
        d_skip = rng.normal(size=4)
        y = selective_scan(Tensor(x), Tensor(a_log), Tensor(bk), Tensor(ck),
                           Tensor(delta), Tensor(d_skip)).numpy()
        for i in range(3):
            yi = selective_scan(Tensor(x[i:i + 1]), Tensor(a_log),
                                Tensor(bk[i:i + 1]), Tensor(ck[i:i + 1]),
                                Tensor(delta[i:i + 1]), Tensor(d_skip)).numpy()
            np.testing.assert_allclose(y[i], yi[0], atol=1e-13)

    def test_zero_b_leaves_skip_path(self):
        rng = seeded_rng(4)
        x = rng.normal(size=(1, 6, 3))
        d_skip = rng.normal(size=3)
        y = selective_scan(Tensor(x), Tensor(np.zeros(4)),
                           Tensor(np.zeros((1, 6, 4))),
                           Tensor(rng.normal(size=(1, 6, 4))),
                           Tensor(np.full((1, 6, 1), 0.3)), Tensor(d_skip))
        np.testing.assert_array_equal(y.numpy(), x * d_skip)

    def test_single_block_gradients(self):
        rng = seeded_rng(5)
        block = SelectiveSSMBlock(4, 3, rng)
        x = Tensor(seeded_rng(6).normal(size=(1, 5, 4)))

        def loss(_params):
            y = block(x)
            return T.sum_(T.mul(y, y))

        report = finite_difference_check(loss, block.parameters(), seed=7)
        assert report.passed, str(report)


class TestCrossModalScan:
    def test_matches_numpy_rederivation(self):
        # full block wiring on a random 6-step, N=4, d_model=3 instance:
        # the visual stream must be read out through the series stream's C
        # and vice versa
        rng = seeded_rng(8)
        block = CrossModalFusionBlock(3, 4, rng)
        x_s = seeded_rng(9).normal(size=(1, 6, 3))
        x_i = seeded_rng(10).normal(size=(1, 6, 3))
        y_s, y_i = block(Tensor(x_s), Tensor(x_i))

        ps, pi = block.params_s, block.params_i
        in_s, gate_s, b_s, c_s, d_s = _param_gen_np(ps, x_s)
        in_i, gate_i, b_i, c_i, d_i = _param_gen_np(pi, x_i)
        scan_s = oracles.selective_scan_raw_reference(
            -np.exp(ps.a_log.data), b_s[0], c_i[0], d_s[0, :, 0],
            ps.d_skip.data, in_s[0])
        scan_i = oracles.selective_scan_raw_reference(
            -np.exp(pi.a_log.data), b_i[0], c_s[0], d_i[0, :, 0],
            pi.d_skip.data, in_i[0])
        ref_s = x_s + (scan_s * (gate_s[0] * _sigmoid_np(gate_s[0]))) \
            @ ps.out_proj.weight.data + ps.out_proj.bias.data
        ref_i = x_i + (scan_i * (gate_i[0] * _sigmoid_np(gate_i[0]))) \
            @ pi.out_proj.weight.data + pi.out_proj.bias.data
        np.testing.assert_allclose(y_s.numpy()[0], ref_s[0], atol=1e-12)
        np.testing.assert_allclose(y_i.numpy()[0], ref_i[0], atol=1e-12)

    def test_tied_parameters_swap_symmetry(self):
        rng = seeded_rng(11)
        block = CrossModalFusionBlock(4, 3, rng)
        block.params_i.load_state_dict(block.params_s.state_dict())
        x = Tensor(seeded_rng(12).normal(size=(2, 5, 4)))
        y_s, y_i = block(x, x)
        np.testing.assert_array_equal(y_s.numpy(), y_i.numpy())
        single = SelectiveSSMBlock(4, 3, seeded_rng(13))
        single.params.load_state_dict(block.params_s.state_dict())
        np.testing.assert_array_equal(y_s.numpy(), single(x).numpy())

    def test_length_mismatch_rejected(self):
        block = CrossModalFusionBlock(4, 3, seeded_rng(14))
        with pytest.raises(ContractError):
            block(Tensor(np.zeros((1, 5, 4))), Tensor(np.zeros((1, 6, 4))))


class TestAlignment:
    def test_replicates_final_row(self):
        rng = seeded_rng(15)
        x_s = rng.normal(size=(1, 4, 3))
        x_i = rng.normal(size=(1, 7, 3))
        a_s, a_i = align_lengths(Tensor(x_s), Tensor(x_i))
        assert a_s.shape == (1, 7, 3)
        np.testing.assert_array_equal(a_i.numpy(), x_i)
        np.testing.assert_array_equal(a_s.numpy()[:, :4], x_s)
        for k in range(4, 7):
            np.testing.assert_array_equal(a_s.numpy()[:, k], x_s[:, 3])

    def test_equal_lengths_pass_through(self):
        x_s = Tensor(seeded_rng(16).normal(size=(1, 5, 3)))
        x_i = Tensor(seeded_rng(17).normal(size=(1, 5, 3)))
        a_s, a_i = align_lengths(x_s, x_i)
        assert a_s is x_s and a_i is x_i

    def test_single_frame_replicated_everywhere(self):
        x_s = seeded_rng(18).normal(size=(1, 1, 3))
        a_s, _ = align_lengths(Tensor(x_s), Tensor(np.zeros((1, 6, 3))))
        np.testing.assert_array_equal(a_s.numpy(),
                                      np.repeat(x_s, 6, axis=1))

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            align_lengths(Tensor(np.zeros((1, 0, 3))),
                          Tensor(np.zeros((1, 4, 3))))
        with pytest.raises(ContractError):
            align_lengths(Tensor(np.zeros((1, 5, 3))),
                          Tensor(np.zeros((1, 4, 3))))
        with pytest.raises(ContractError):
            align_lengths(Tensor(np.zeros((5, 3))),
                          Tensor(np.zeros((1, 4, 3))))


class TestForecastDecoder:
    def test_causal_mask_isolates_later_slots(self):
        rng = seeded_rng(19)
        dec = ForecastDecoder(8, 5, rng)
        h = Tensor(seeded_rng(20).normal(size=(2, 6, 8)))
        base = dec(h).numpy()
        dec.queries.data[3] += 1.0
        bumped = dec(h).numpy()
        np.testing.assert_array_equal(bumped[:, :3], base[:, :3])
        assert not np.allclose(bumped[:, 3], base[:, 3])

    def test_zero_head_weights_constant_forecast(self):
        rng = seeded_rng(21)
        dec = ForecastDecoder(8, 4, rng)
        dec.head.weight.data[...] = 0.0
        dec.head.bias.data[...] = 2.5
        out = dec(Tensor(seeded_rng(22).normal(size=(1, 7, 8)))).numpy()
        np.testing.assert_array_equal(out, np.full((1, 4), 2.5))

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ContractError):
            ForecastDecoder(6, 3, seeded_rng(23))


class TestFusionHeads:
    def test_scan_fusion_shape(self):
        rng = seeded_rng(24)
        fusion = ScanFusion(8, 4, 6, rng)
        out = fusion(Tensor(seeded_rng(25).normal(size=(1, 7, 8))),
                     Tensor(seeded_rng(26).normal(size=(1, 13, 8))))
        assert out.shape == (1, 6)

    def test_concat_fusion_mixer_toggle(self):
        rng = seeded_rng(27)
        plain = ConcatFusion(8, 3, rng, mixer=False)
        mixed = ConcatFusion(8, 3, seeded_rng(27), mixer=True)
        plain_names = {n for n, _ in plain.named_parameters()}
        mixed_names = {n for n, _ in mixed.named_parameters()}
        extra = mixed_names - plain_names
        assert extra == {"mix1.weight", "mix1.bias", "mix2.weight", "mix2.bias"}
        x_s = Tensor(seeded_rng(28).normal(size=(1, 4, 8)))
        x_i = Tensor(seeded_rng(29).normal(size=(1, 7, 8)))
        assert plain(x_s, x_i).shape == (1, 3)
        assert mixed(x_s, x_i).shape == (1, 3)

    def test_temporal_only_shape(self):
        fusion = TemporalOnlyFusion(8, 4, seeded_rng(30))
        assert fusion(Tensor(np.zeros((2, 9, 8)))).shape == (2, 4)

    def test_scan_fusion_gradients(self):
        rng = seeded_rng(31)
        fusion = ScanFusion(4, 2, 2, rng)
        x_s = Tensor(seeded_rng(32).normal(size=(1, 3, 4)))
        x_i = Tensor(seeded_rng(33).normal(size=(1, 5, 4)))

        def loss(_params):
            y = fusion(x_s, x_i)
            return T.sum_(T.mul(y, y))

        report = finite_difference_check(loss, fusion.parameters(),
                                         max_coords_per_param=15, seed=34)
        assert report.passed, str(report)
