import numpy as np
import pytest

from linsplit import tensor as T
from linsplit.errors import ConfigError, DimensionError, FormatError
from linsplit.models import (ModelConfig, build, default_config, forward, forward_collect,
                             load_checkpoint, read_checkpoint_arrays, save_checkpoint)
from linsplit.mask import proportion_nonlinear
from linsplit.tensor import Tensor

from oracles import force_masks, network_gradcheck, perturb


def conv_cfg(**kw):
    base = dict(kind="convnet-m", widths=(1, 3, 4, 3), mask_placement=(1, 2), num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_mlp_classifier_width(self):
        net = build(ModelConfig("mlp-m", (3, 16, 16), (1,), 2), seed=0)
        assert net.classifier.in_features == 16 + 16
        assert len(net.mask_modules) == 1

    def test_empty_placement_is_baseline(self):
        net = build(default_config("convnet-m", 1, 10, mask_placement=()), seed=0)
        assert net.classifier.in_features == 64
        assert not net.mask_modules and not net.branch_parameters()

    @pytest.mark.parametrize("placement", [(2, 1), (0,), (3,), (1, 1)])
    def test_invalid_placement(self, placement):
        with pytest.raises(ConfigError):
            build(ModelConfig("convnet-m", (1, 4, 4, 4), placement, 2))

    def test_residual_needs_conv(self):
        with pytest.raises(ConfigError):
            build(ModelConfig("mlp-m", (3, 4, 4), (1,), 2, use_residual=True))

    def test_same_seed_same_params(self):
        a = build(conv_cfg(use_residual=True), seed=5)
        b = build(conv_cfg(use_residual=True), seed=5)
        c = build(conv_cfg(use_residual=True), seed=6)
        for (na, pa), (nb, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(),
                                               c.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)
        assert any(not np.array_equal(pa.data, pc.data)
                   for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))

    def test_head_count_matches_masks(self):
        net = build(conv_cfg(head_dim=5), seed=0)
        assert len(net.mask_modules) == len(net.branch_parameters()) // 2 == 2
        assert net.classifier.in_features == 5 + 5 + 3

    @pytest.mark.parametrize("kind", ["convnet-m"])
    def test_mask_params_small(self, kind):
        net = build(default_config(kind, 1, 10), seed=0)
        mask = sum(p.data.size for p in net.mask_parameters())
        backbone = sum(p.data.size for p in net.backbone_parameters())
        assert mask < 0.05 * backbone

    def test_mlp_default_mask_fraction_is_large(self):
        # the G network alone outweighs a 3-16-16 backbone; recorded, not asserted < 5%
        net = build(default_config("mlp-m", 3, 2), seed=0)
        mask = sum(p.data.size for p in net.mask_parameters())
        assert mask == 16 + 4 * 16 + 4 + 16 * 4 + 16


class TestForward:
    def test_post_init_masks_all_ones(self, rng):
        net = build(conv_cfg(), seed=1)
        x = rng.standard_normal((2, 1, 8, 8))
        logits = net(x).data
        # with mask2 == 0 the heads only see zeros; reproduce by hand
        h = Tensor(x)
        branch = []
        for s in net.stages:
            f = s.block(h)
            if s.head is not None:
                branch.append(s.head(Tensor(np.zeros(f.shape))))
            h = T.relu(f)
            if s.pool:
                h = T.maxpool2d(h, 2)
        feats = T.concat(branch + [T.global_avg_pool(h)], 1)
        assert np.array_equal(net.classifier(feats).data, logits)
        for s in net.stages:
            if s.head is not None:
                hb = s.head(Tensor(np.zeros((1, s.head.in_channels, 1, 1)))).data
                assert np.array_equal(hb[0], s.head.affine.bias.data)

    def test_zero_input_zero_biases(self):
        net = build(conv_cfg(), seed=0)
        assert not net(np.zeros((2, 1, 8, 8))).data.any()
        mlp = build(ModelConfig("mlp-m", (3, 5, 4), (1,), 2), seed=0)
        assert not mlp(np.zeros((3, 3))).data.any()

    def test_step_by_step_mlp(self, rng):
        net = perturb(build(ModelConfig("mlp-m", (3, 4, 4), (1,), 2), seed=3), rng, 0.5)
        force_masks(net, [1, 0, 0, 1])
        x = rng.standard_normal((1, 3))
        s1, s2 = net.stages
        mod = s1.mask
        z = np.tanh(mod.w2.data @ np.maximum(mod.w1.data @ mod.m.data + mod.b1.data, 0) + mod.b2.data)
        m1 = (z > 0).astype(float)
        f1 = x @ s1.block.fc.weight.data.T + s1.block.fc.bias.data
        nonlin = np.maximum(m1 * f1, 0)
        branch = ((1 - m1) * f1) @ s1.head.affine.weight.data.T + s1.head.affine.bias.data
        f2 = np.maximum(nonlin @ s2.block.fc.weight.data.T + s2.block.fc.bias.data, 0)
        want = np.concatenate([branch, f2], 1) @ net.classifier.weight.data.T + net.classifier.bias.data
        assert np.allclose(forward(net, x).data, want, atol=1e-13)

    def test_wrong_rank(self):
        with pytest.raises(DimensionError):
            build(conv_cfg(), seed=0)(np.zeros((2, 8)))

    def test_forward_collect(self, rng):
        net = build(conv_cfg(), seed=0)
        logits, masks, props = forward_collect(net, rng.standard_normal((2, 1, 8, 8)))
        assert props == [1.0, 1.0] and len(masks) == 2
        force_masks(net, rng=rng)
        logits, masks, props = forward_collect(net, rng.standard_normal((2, 1, 8, 8)))
        assert props == [proportion_nonlinear(m.bits1) for m in masks]
        assert props == net.proportions()

    def test_baseline_equivalence(self, rng):
        net = build(conv_cfg(mask_placement=()), seed=4)
        x = rng.standard_normal((3, 1, 8, 8))
        h = Tensor(x)
        for s in net.stages:
            h = T.relu(s.block(h))
            if s.pool:
                h = T.maxpool2d(h, 2)
        want = net.classifier(T.global_avg_pool(h)).data
        assert np.array_equal(net(x).data, want)
        masked = build(conv_cfg(), seed=4)
        for sa, sb in zip(net.stages, masked.stages):
            for (_, pa), (_, pb) in zip(sa.block.named_parameters(), sb.block.named_parameters()):
                assert np.array_equal(pa.data, pb.data)
        assert np.array_equal(masked.classifier.weight.data[:, -3:], net.classifier.weight.data)

    def test_branch_linearity_through_classifier(self, rng):
        net = perturb(build(conv_cfg(), seed=2), rng)
        head = net.stages[0].head
        cls_w = net.classifier.weight.data[:, :head.out_dim]
        shape = (2, head.in_channels, 8, 8)
        f = lambda u: head(Tensor(u)).data @ cls_w.T
        u, v = rng.standard_normal(shape), rng.standard_normal(shape)
        a, b = 0.7, -1.9
        assert np.max(np.abs(f(a * u + b * v) - a * f(u) - b * f(v)
                             - (1 - a - b) * f(np.zeros(shape)))) < 1e-9


class TestNetworkGradients:
    @pytest.mark.parametrize("cfg,shape", [
        (conv_cfg(), (2, 1, 6, 6)),
        (conv_cfg(use_residual=True, widths=(2, 3, 3, 4)), (2, 2, 5, 5)),
        (ModelConfig("mlp-m", (3, 5, 4, 3), (1, 2), 3), (4, 3)),
    ])
    def test_full_network(self, rng, cfg, shape):
        net = perturb(build(cfg, seed=0), rng)
        force_masks(net, rng=rng)
        x = rng.standard_normal(shape)
        y = rng.integers(0, cfg.num_classes, shape[0])
        network_gradcheck(net, x, y)


class TestCheckpoint:
    @pytest.mark.parametrize("cfg", [conv_cfg(), conv_cfg(use_residual=True),
                                     ModelConfig("mlp-m", (3, 6, 6), (1,), 2, tau=0.1,
                                                 ste_sign_convention="chain")])
    def test_round_trip(self, tmp_path, rng, cfg):
        net = perturb(build(cfg, seed=0), rng)
        path = tmp_path / "net.mgk"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert [n for n, _ in back.named_parameters()] == [n for n, _ in net.named_parameters()]
        for (_, a), (_, b) in zip(net.named_parameters(), back.named_parameters()):
            assert np.array_equal(a.data, b.data)
        x = rng.standard_normal((2, 1, 8, 8)) if cfg.kind == "convnet-m" else rng.standard_normal((2, 3))
        assert np.array_equal(net(x).data, back(x).data)
        assert back.mask_modules[0].tau == cfg.tau
        assert back.mask_modules[0].ste_sign_convention == cfg.ste_sign_convention

    def test_layout(self, tmp_path):
        net = build(ModelConfig("mlp-m", (3, 4, 4), (1,), 2), seed=0)
        path = tmp_path / "net.mgk"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        assert blob[:4] == b"MGK1"
        n = int.from_bytes(blob[4:8], "little")
        assert blob[8:8 + n] == b"meta.kind"
        arrays = read_checkpoint_arrays(path)
        assert arrays["blocks.1.fc.weight"].shape == (4, 3)

    def test_truncated(self, tmp_path):
        net = build(ModelConfig("mlp-m", (3, 4, 4), (1,), 2), seed=0)
        path = tmp_path / "net.mgk"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.mgk"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            load_checkpoint(path)
