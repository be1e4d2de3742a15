"""Flow-transformer contracts: shapes, conditioning paths, rotary attention."""

import numpy as np
import pytest

from meanflow import autodiff as ad
from meanflow.autodiff import Tensor
from meanflow.net import (
    FlowNetConfig,
    adaln_modulate,
    apply_flow_net,
    conv_mlp,
    embed_condition,
    init_params,
    rms_norm,
    rope_apply,
    timestep_embed,
)
from meanflow.rng import derive_rng

from conftest import jittered_params, tiny_config


def _inputs(cfg, b=3, l=4, seed=0, dtype=np.float64):
    rng = derive_rng(seed, 21)
    x = Tensor(rng.normal(size=(b, l, cfg.latent_dim)).astype(dtype))
    t = Tensor(rng.uniform(0.3, 0.9, size=b).astype(dtype))
    r = Tensor((t.numpy() * rng.uniform(0.0, 1.0, size=b)).astype(dtype))
    labels = rng.integers(0, cfg.n_labels, size=b)
    return x, r, t, labels


class TestConfig:
    def test_head_dim_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(hidden_dim=18, n_heads=4)

    def test_head_dim_must_be_even(self):
        with pytest.raises(ValueError, match="even"):
            tiny_config(hidden_dim=6, n_heads=2)

    def test_needs_a_joint_block(self):
        with pytest.raises(ValueError, match="n_mm_blocks"):
            tiny_config(n_mm_blocks=0)


class TestForward:
    @pytest.mark.parametrize("b,l", [(1, 1), (3, 4), (2, 2)])
    def test_shape_closure(self, tiny_cfg, tiny_params, b, l):
        x, r, t, labels = _inputs(tiny_cfg, b=b, l=l)
        out = apply_flow_net(tiny_cfg, tiny_params, x, r, t, labels)
        assert out.shape == (b, l, tiny_cfg.latent_dim)
        assert np.all(np.isfinite(out.numpy()))

    def test_zero_network_broadcasts_final_bias(self, tiny_cfg):
        params = init_params(tiny_cfg, seed=0, dtype=np.float64)
        for name in params.names():
            params.replace(name, Tensor(np.zeros(params[name].shape)))
        bias = np.array([0.7, -1.2])
        params.replace("final.out.b", Tensor(bias))
        x, r, t, labels = _inputs(tiny_cfg)
        out = apply_flow_net(tiny_cfg, params, x, r, t, labels).numpy()
        assert np.allclose(out, bias, atol=1e-12)

    def test_fresh_init_outputs_zero(self, tiny_cfg):
        params = init_params(tiny_cfg, seed=3, dtype=np.float64)
        x, r, t, labels = _inputs(tiny_cfg)
        out = apply_flow_net(tiny_cfg, params, x, r, t, labels).numpy()
        assert np.all(out == 0.0)

    def test_diagonal_times_allowed(self, tiny_cfg, tiny_params):
        x, _, t, labels = _inputs(tiny_cfg)
        out = apply_flow_net(tiny_cfg, tiny_params, x, t, t, labels)
        assert out.shape == x.shape

    def test_time_ordering_enforced(self, tiny_cfg, tiny_params):
        x, r, t, labels = _inputs(tiny_cfg)
        with pytest.raises(ValueError, match="0 <= r <= t <= 1"):
            apply_flow_net(tiny_cfg, tiny_params, x, t, r, labels)

    def test_sequence_length_capped(self, tiny_cfg, tiny_params):
        x, r, t, labels = _inputs(tiny_cfg, l=tiny_cfg.max_seq_len + 1)
        with pytest.raises(ValueError, match="max_seq_len"):
            apply_flow_net(tiny_cfg, tiny_params, x, r, t, labels)

    def test_label_range_checked(self, tiny_cfg, tiny_params):
        x, r, t, labels = _inputs(tiny_cfg)
        labels = labels.copy()
        labels[0] = tiny_cfg.null_label + 1
        with pytest.raises(ValueError, match="labels"):
            apply_flow_net(tiny_cfg, tiny_params, x, r, t, labels)

    def test_null_condition_ignores_would_be_label(self, tiny_cfg, tiny_params):
        x, r, t, _ = _inputs(tiny_cfg)
        null = np.full(3, tiny_cfg.null_label)
        out1 = apply_flow_net(tiny_cfg, tiny_params, x, r, t, null).numpy()
        out2 = apply_flow_net(tiny_cfg, tiny_params, x, r, t, null.copy()).numpy()
        assert np.array_equal(out1, out2)
        cond = apply_flow_net(tiny_cfg, tiny_params, x, r, t, np.array([0, 1, 2])).numpy()
        assert not np.allclose(out1, cond)

    def test_jvp_against_finite_differences(self, tiny_cfg, tiny_params):
        x, r, t, labels = _inputs(tiny_cfg)
        rng = derive_rng(5, 22)
        v = Tensor(rng.normal(size=x.shape))
        tangents = [v, Tensor(np.zeros(3)), Tensor(np.ones(3))]

        def f(xx, rr, tt):
            return apply_flow_net(tiny_cfg, tiny_params, xx, rr, tt, labels)

        _, tan = ad.jvp(f, [x, r, t], tangents)
        fd = ad.finite_diff_jvp(f, [x, r, t], tangents, h=1e-4)
        err = np.abs(tan.numpy() - fd.numpy()) / (1.0 + np.abs(fd.numpy()))
        assert err.max() <= 1e-4


class TestRope:
    def test_position_zero_is_identity(self):
        rng = derive_rng(0, 23)
        q = Tensor(rng.normal(size=(2, 3, 1, 8)))
        k = Tensor(rng.normal(size=(2, 3, 1, 8)))
        q2, k2 = rope_apply(q, k, np.array([0]))
        np.testing.assert_allclose(q2.numpy(), q.numpy(), atol=1e-12)
        np.testing.assert_allclose(k2.numpy(), k.numpy(), atol=1e-12)

    def test_norm_preserved(self):
        rng = derive_rng(1, 23)
        q = Tensor(rng.normal(size=(2, 2, 6, 8)))
        k = Tensor(rng.normal(size=(2, 2, 6, 8)))
        q2, _ = rope_apply(q, k, np.arange(6))
        np.testing.assert_allclose(
            np.linalg.norm(q2.numpy(), axis=-1), np.linalg.norm(q.numpy(), axis=-1), rtol=1e-10
        )

    @pytest.mark.parametrize("delta", [1, 5, 11])
    def test_relative_position_invariance(self, delta):
        rng = derive_rng(2, 23)
        q = Tensor(rng.normal(size=(1, 1, 2, 16)))
        k = Tensor(rng.normal(size=(1, 1, 2, 16)))
        i, j = 3, 7
        q_a, k_a = rope_apply(q, k, np.array([i, j]))
        q_b, k_b = rope_apply(q, k, np.array([i + delta, j + delta]))
        dot_a = float(np.sum(q_a.numpy()[0, 0, 0] * k_a.numpy()[0, 0, 1]))
        dot_b = float(np.sum(q_b.numpy()[0, 0, 0] * k_b.numpy()[0, 0, 1]))
        assert abs(dot_a - dot_b) <= 1e-10

    def test_odd_head_dim_rejected(self):
        q = Tensor(np.zeros((1, 1, 2, 5)))
        with pytest.raises(ValueError, match="even"):
            rope_apply(q, q, np.array([0, 1]))


class TestAdaLN:
    def test_zero_modulation_is_plain_normalization(self):
        rng = derive_rng(3, 24)
        h = Tensor(rng.normal(size=(2, 3, 8)) * 3.0 + 1.0)
        zero = Tensor(np.zeros((2, 1, 8)))
        out = adaln_modulate(h, zero, zero).numpy()
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-7)
        assert np.allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_constant_features_hit_epsilon_floor(self):
        h = Tensor(np.full((1, 2, 8), 4.2))
        zero = Tensor(np.zeros((1, 1, 8)))
        out = adaln_modulate(h, zero, zero).numpy()
        assert np.all(np.isfinite(out))
        assert np.allclose(out, 0.0, atol=1e-6)

    def test_distinct_conditions_modulate_differently(self, tiny_cfg):
        params = jittered_params(tiny_cfg, seed=9, scale=0.1)
        x, r, t, _ = _inputs(tiny_cfg)
        out_a = apply_flow_net(tiny_cfg, params, x, r, t, np.array([0, 0, 0])).numpy()
        out_b = apply_flow_net(tiny_cfg, params, x, r, t, np.array([1, 1, 1])).numpy()
        assert not np.allclose(out_a, out_b)


class TestConvMlp:
    @pytest.mark.parametrize("l", [1, 2, 16])
    def test_length_preserved(self, l):
        cfg = tiny_config(max_seq_len=16)
        params = jittered_params(cfg, seed=4)
        rng = derive_rng(4, 25)
        h = Tensor(rng.normal(size=(2, l, cfg.hidden_dim)))
        out = conv_mlp(params, "mm0.a", h)
        assert out.shape == h.shape

    def test_receptive_field_is_two_tokens(self):
        cfg = tiny_config(max_seq_len=16)
        params = jittered_params(cfg, seed=5)
        rng = derive_rng(5, 25)
        h = rng.normal(size=(1, 10, cfg.hidden_dim))
        base = conv_mlp(params, "mm0.a", Tensor(h)).numpy()
        bumped = h.copy()
        bumped[0, 4] += 1.0
        out = conv_mlp(params, "mm0.a", Tensor(bumped)).numpy()
        changed = np.where(np.any(np.abs(out - base) > 1e-12, axis=-1)[0])[0]
        assert changed.min() >= 2 and changed.max() <= 6

    def test_single_token_behaves_like_mlp_center_column(self):
        cfg = tiny_config()
        params = jittered_params(cfg, seed=6)
        rng = derive_rng(6, 25)
        h = Tensor(rng.normal(size=(2, 1, cfg.hidden_dim)))
        out = conv_mlp(params, "sm0.a", h).numpy()
        w1 = params["sm0.a.conv1.w"].numpy()[1]  # kernel center
        b1 = params["sm0.a.conv1.b"].numpy()
        w2 = params["sm0.a.conv2.w"].numpy()[1]
        b2 = params["sm0.a.conv2.b"].numpy()
        hv = h.numpy()[:, 0, :]
        mid = ad.silu(Tensor(hv @ w1 + b1)).numpy()
        expect = mid @ w2 + b2
        np.testing.assert_allclose(out[:, 0, :], expect, atol=1e-10)


class TestRmsNorm:
    def test_unit_scale_normalizes_rms(self):
        rng = derive_rng(7, 26)
        h = Tensor(rng.normal(size=(3, 8)) * 5.0)
        out = rms_norm(h, Tensor(np.ones(8))).numpy()
        rms = np.sqrt(np.mean(out ** 2, axis=-1))
        np.testing.assert_allclose(rms, 1.0, rtol=1e-5)

    def test_zero_input_stays_zero(self):
        out = rms_norm(Tensor(np.zeros((2, 8))), Tensor(np.ones(8))).numpy()
        assert np.all(out == 0.0)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
    def test_positive_homogeneity(self, alpha):
        rng = derive_rng(8, 26)
        h = rng.normal(size=(3, 8))
        a = rms_norm(Tensor(h), Tensor(np.ones(8))).numpy()
        b = rms_norm(Tensor(alpha * h), Tensor(np.ones(8))).numpy()
        # scaling moves the 1e-6 epsilon floor to eps/alpha^2, shifting the
        # output by about |out| * eps * |1 - 1/alpha^2| / (2 * mean(h^2))
        eps = 1e-6
        bound = np.abs(a) * eps * abs(1.0 - 1.0 / alpha ** 2) / (2.0 * np.mean(h ** 2, axis=-1, keepdims=True))
        assert np.all(np.abs(a - b) <= bound + 1e-9)


class TestConditioning:
    def test_embed_condition_is_pure_lookup(self, tiny_cfg, tiny_params):
        t1, g1 = embed_condition(tiny_cfg, tiny_params, 1)
        t2, g2 = embed_condition(tiny_cfg, tiny_params, 1)
        assert np.array_equal(t1.numpy(), t2.numpy())
        assert np.array_equal(g1.numpy(), g2.numpy())
        assert t1.shape == (tiny_cfg.pseudo_token_count, tiny_cfg.hidden_dim)
        assert g1.shape == (tiny_cfg.hidden_dim,)

    def test_null_row_is_distinct_parameters(self, tiny_cfg, tiny_params):
        toks = [embed_condition(tiny_cfg, tiny_params, k)[1].numpy() for k in range(tiny_cfg.n_labels)]
        null = embed_condition(tiny_cfg, tiny_params, tiny_cfg.null_label)[1].numpy()
        assert np.linalg.norm(null) > 0.0
        for vec in toks:
            assert np.linalg.norm(vec - null) > 0.0

    def test_labels_pairwise_distinct_at_init(self, tiny_cfg):
        params = init_params(tiny_cfg, seed=12, dtype=np.float64)
        vecs = [embed_condition(tiny_cfg, params, k)[1].numpy() for k in range(tiny_cfg.n_labels + 1)]
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                assert np.linalg.norm(vecs[i] - vecs[j]) > 0.0

    def test_out_of_range_label_rejected(self, tiny_cfg, tiny_params):
        with pytest.raises(ValueError, match="label"):
            embed_condition(tiny_cfg, tiny_params, tiny_cfg.null_label + 1)


class TestTimestepEmbed:
    def test_deterministic_and_distinct_endpoints(self, tiny_cfg, tiny_params):
        e0 = timestep_embed(tiny_cfg, tiny_params, Tensor([0.0])).numpy()
        e0b = timestep_embed(tiny_cfg, tiny_params, Tensor([0.0])).numpy()
        e1 = timestep_embed(tiny_cfg, tiny_params, Tensor([1.0])).numpy()
        assert np.array_equal(e0, e0b)
        assert np.linalg.norm(e0 - e1) > 1e-3

    def test_range_checked(self, tiny_cfg, tiny_params):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            timestep_embed(tiny_cfg, tiny_params, Tensor([1.5]))

    def test_local_smoothness_with_measured_constant(self, tiny_cfg, tiny_params):
        grid = np.linspace(0.0, 1.0, 201)
        embs = timestep_embed(tiny_cfg, tiny_params, Tensor(grid)).numpy()
        diffs = np.linalg.norm(np.diff(embs, axis=0), axis=1) / (grid[1] - grid[0])
        lipschitz = diffs.max()
        probes = np.array([0.1, 0.37, 0.52, 0.83])
        ea = timestep_embed(tiny_cfg, tiny_params, Tensor(probes)).numpy()
        eb = timestep_embed(tiny_cfg, tiny_params, Tensor(probes + 1e-3)).numpy()
        gaps = np.linalg.norm(eb - ea, axis=1)
        assert np.all(gaps <= 1.5 * lipschitz * 1e-3)
