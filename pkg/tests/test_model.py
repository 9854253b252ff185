import numpy as np
import pytest

from graft import tensor as T
from graft.gradcheck import numeric_grad, rel_error
from graft.losses import (Centroids, LossWeights, TripletScheme, center_loss, cross_entropy_label_smoothing,
                          select_triplet_embeddings, soft_margin_triplet, total_loss)
from graft.model import GraftConfig, GraftModel, count_parameters, fuse_average, modality_encoder_layer, patchify
from graft.nn import ConfigError, EncoderBlock
from graft.tensor import Tensor


def small(**kw):
    base = dict(n_modalities=2, channels=3, height=16, width=16, patch_size=8, embed_dim=8, depth=1, heads=2,
                encoder_heads=2, n_classes=3, mlp_ratio=2)
    base.update(kw)
    return GraftConfig(**base)


def images(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(size=(n, cfg.channels, cfg.height, cfg.width)) for _ in range(cfg.n_modalities)]


def block_sizes(hidden_ratio, d):
    # ln1 + attention (4 square projections with biases) + ln2 + two-layer MLP with biases
    return 2 * d + 4 * d * d + 4 * d + 2 * d + (d * hidden_ratio * d + hidden_ratio * d) + (hidden_ratio * d * d + d)


class TestPatchEmbed:
    def test_token_counts(self):
        assert GraftConfig(height=224, width=224, patch_size=16).n_patches == 196
        assert GraftConfig(height=32, width=32, patch_size=16).n_patches == 4

    def test_zero_image_zero_projection_gives_positions(self):
        model = GraftModel(small())
        model.patch.proj.weight.data[:] = 0
        model.patch.proj.bias.data[:] = 0
        out = model.patch(np.zeros((2, 3, 16, 16))).data
        assert np.array_equal(out, np.broadcast_to(model.patch.pos.data, out.shape))

    def test_patch_order_row_major(self):
        img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
        p = patchify(img, 2)
        assert p.shape == (1, 4, 8)
        assert np.array_equal(p[0, 1], img[0, :, 0:2, 2:4].ravel())

    def test_indivisible_image(self):
        with pytest.raises(ConfigError, match="divisible"):
            small(height=12).validate()


class TestBackbone:
    def test_shape_preserving(self):
        model = GraftModel(small(depth=2))
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 8)))
        assert model.backbone(x).shape == (3, 4, 8)

    def test_depth_zero_is_identity(self):
        model = GraftModel(small(depth=0))
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 8)))
        assert model.backbone(x) is x

    def test_modalities_share_backbone_weights(self):
        model = GraftModel(small(n_modalities=3))
        ids = {id(p) for p in model.backbone.parameters()}
        assert len(ids) == len(model.backbone.parameters())
        # one backbone object; encoders are separate and share nothing
        enc_ids = [{id(p) for p in e.parameters()} for e in model.encoders]
        assert not (enc_ids[0] & enc_ids[1]) and not (enc_ids[1] & enc_ids[2])
        assert not (ids & set().union(*enc_ids))


class TestEncoderLayer:
    def test_identity_encoder_returns_inputs(self):
        block = EncoderBlock(8, 2, np.random.default_rng(0), mlp_ratio=2)
        block.attn.o.data[:] = 0
        block.attn.bo.data[:] = 0
        block.mlp.fc2.weight.data[:] = 0
        block.mlp.fc2.bias.data[:] = 0
        f = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
        d = Tensor(np.random.default_rng(2).normal(size=(4, 8)))
        z_f, z_d = modality_encoder_layer(block, f, d)
        assert np.array_equal(z_f.data, f.data) and np.array_equal(z_d.data, d.data)

    def test_output_shapes(self):
        block = EncoderBlock(8, 2, np.random.default_rng(0))
        z_f, z_d = modality_encoder_layer(block, Tensor(np.ones((1, 8))), Tensor(np.ones((4, 8))))
        assert z_f.shape == (1, 8) and z_d.shape == (4, 8)

    def test_one_layer_call_isolates_modalities(self):
        model = GraftModel(small())
        fusion = Tensor(model.fusion.tokens.data)
        rng = np.random.default_rng(3)
        d0, d1 = Tensor(rng.normal(size=(4, 8))), rng.normal(size=(4, 8))
        first = modality_encoder_layer(model.encoders[0].layers[0], fusion, d0)
        modality_encoder_layer(model.encoders[1].layers[0], fusion, Tensor(d1))
        modality_encoder_layer(model.encoders[1].layers[0], fusion, Tensor(d1 + 5.0))
        again = modality_encoder_layer(model.encoders[0].layers[0], fusion, d0)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(first, again))


class TestFuseAverage:
    def test_identical_inputs(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 8))
        assert np.array_equal(fuse_average([Tensor(x)] * 3).data, x)

    def test_two_point_average(self):
        out = fuse_average([Tensor([[1.0, 3.0]]), Tensor([[3.0, 5.0]])])
        assert np.array_equal(out.data, [[2.0, 4.0]])

    def test_single_modality_identity(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 4)))
        assert fuse_average([x]) is x

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            fuse_average([])

    def test_order_independent_bit_exact(self):
        xs = [Tensor(np.random.default_rng(i).normal(size=(3, 5))) for i in range(4)]
        ref = fuse_average(xs).data
        for perm in ([3, 1, 0, 2], [2, 3, 1, 0]):
            assert np.array_equal(fuse_average([xs[i] for i in perm]).data, ref)


class TestForward:
    def test_output_shapes(self):
        cfg = small(n_fusion_tokens=2)
        out = GraftModel(cfg)(images(cfg, n=3))
        assert out.embed.shape == (3, 16)
        assert [d.shape for d in out.data_tokens] == [(3, 4, 8)] * 2
        assert out.logits.shape == (3, 3)

    def test_single_modality_embed_is_encoder_output(self):
        cfg = small(n_modalities=1)
        model = GraftModel(cfg)
        imgs = images(cfg)
        tokens = model.encode_tokens(imgs)[0]
        fusion = T.broadcast_to(model.fusion.tokens, (2, 1, 8))
        z_f, _ = modality_encoder_layer(model.encoders[0].layers[0], fusion, tokens)
        assert np.array_equal(model(imgs).embed.data, z_f.data.reshape(2, 8))

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_fusion_parameter_count_independent_of_modalities(self, m):
        model = GraftModel(small(n_modalities=m, n_fusion_tokens=1))
        assert count_parameters(model)["fusion"] == 8

    def test_modality_count_mismatch(self):
        cfg = small()
        with pytest.raises(ConfigError, match="modalities"):
            GraftModel(cfg)(images(cfg)[:1])

    def test_attention_isolation_with_fusion_ablated(self):
        cfg = small(n_modalities=3, n_encoder_layers=3)
        model = GraftModel(cfg)
        imgs = images(cfg, n=2)
        base = model(imgs, ablate_fusion=True).data_tokens
        perturbed = [imgs[0], imgs[1] + np.random.default_rng(9).normal(size=imgs[1].shape), imgs[2]]
        out = model(perturbed, ablate_fusion=True).data_tokens
        assert np.array_equal(out[0].data, base[0].data)
        assert np.array_equal(out[2].data, base[2].data)
        assert not np.array_equal(out[1].data, base[1].data)
        # without the ablation the fusion token carries modality 1 into the others
        assert not np.array_equal(model(perturbed).data_tokens[0].data, model(imgs).data_tokens[0].data)

    def test_modality_permutation_leaves_embed_unchanged(self):
        cfg = small(n_modalities=3, n_encoder_layers=2)
        model = GraftModel(cfg)
        imgs = images(cfg)
        ref = model.embed(imgs)
        perm = [2, 0, 1]
        model.encoders = [model.encoders[i] for i in perm]
        assert np.array_equal(model.embed([imgs[i] for i in perm]), ref)

    def test_embed_does_not_depend_on_head(self):
        cfg = small()
        model = GraftModel(cfg)
        out = model(images(cfg))
        leaves = {id(t) for t in T.graph_leaves(out.embed)}
        head = {id(p) for p in model.head.parameters()}
        assert not (leaves & head)
        assert {id(p) for p in model.head.parameters()} <= {id(t) for t in T.graph_leaves(out.logits)}

    def test_head_has_no_bias(self):
        names = [n for n, _ in GraftModel(small()).named_parameters() if n.startswith("head.")]
        assert names == ["head.bn.gain", "head.fc.weight"]

    def test_vanilla_baselines_shapes(self):
        for fusion in ("vanilla_cls", "vanilla_avg"):
            cfg = small(fusion=fusion)
            out = GraftModel(cfg)(images(cfg, n=3))
            assert out.embed.shape == (3, 8) and out.logits.shape == (3, 3)

    def test_same_seed_same_init(self):
        a, b = GraftModel(small(seed=4)), GraftModel(small(seed=4))
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))

    def test_total_loss_gradient_wrt_fusion_token(self):
        cfg = small(embed_dim=8, height=16, width=16, patch_size=8)
        model = GraftModel(cfg)
        cents = Centroids(3, 8, np.random.default_rng(5))
        imgs = images(cfg, n=2, seed=7)
        labels = np.array([0, 1])
        scheme = TripletScheme.parse("FFD")
        weights = LossWeights(0.5, 0.0005, 0.5)

        def loss():
            out = model(imgs)
            f_a, f_p, f_n = select_triplet_embeddings(scheme, out.embed, out.data_tokens, [0], [0], [1])
            parts = total_loss(soft_margin_triplet(f_a, f_p, f_n), center_loss(f_a, labels[:1], cents.table),
                               cross_entropy_label_smoothing(out.logits, labels, 0.1), weights)
            return parts.total

        model.zero_grad()
        loss().backward()
        analytic = model.fusion.tokens.grad.copy()
        numeric = numeric_grad(lambda: loss().item(), model.fusion.tokens.data)
        assert rel_error(analytic, numeric) < 1e-3


class TestCountParameters:
    def test_small_groups(self):
        model = GraftModel(small(embed_dim=16, heads=2, encoder_heads=2, n_classes=10))
        counts = count_parameters(model, depth=2)
        assert counts["fusion.tokens"] == 16
        assert counts["head.fc"] == 160

    def test_tiny_config_hand_count(self):
        cfg = GraftConfig()  # M=2, D=64, depth 2, 16 patches, 10 classes
        d, l_d, k = 64, 16, 10
        patch = (3 * 8 * 8) * d + d + l_d * d
        expected = (patch + 2 * block_sizes(4, d) + d + 2 * block_sizes(4, d) + d + d * k)
        counts = count_parameters(GraftModel(cfg))
        assert counts["total"] == expected
        assert counts["patch"] == patch and counts["fusion"] == d

    def test_nonzero_variant(self):
        model = GraftModel(small())
        before = count_parameters(model, nonzero=True)["total"]
        model.head.fc.weight.data[:2] = 0
        assert count_parameters(model, nonzero=True)["total"] == before - 2 * 3
        assert count_parameters(model)["total"] == sum(p.data.size for p in model.parameters())
