"""Decoder blocks: latent expansion, coordinate heads, refinement, upsampling."""

import numpy as np
import pytest
import torch

from pcjscc.codec import Codec, CodecConfig
from pcjscc.decoder import Decoder, OffsetUpsampler
from pcjscc.encoder import Mlp
from pcjscc.geometry import knn_radius


def cfg(**kw):
    base = dict(num_points=256, n=32, d_f=32, k=16, r=0.25)
    base.update(kw)
    return CodecConfig(**base)


class TestExpandLatent:
    def test_shape_contract(self):
        dec = Decoder(cfg())
        grid = dec.expand_latent(torch.rand(3, 32))
        assert grid.shape == (3, 16, 32)

    def test_kernel_parameter_count(self):
        dec = Decoder(cfg())
        # single input position with n channels, kernel extent N/16
        assert dec.expand.weight.shape == (32, 32, 16)

    def test_zero_kernel_gives_zero_grid(self):
        dec = Decoder(cfg())
        with torch.no_grad():
            dec.expand.weight.zero_()
            dec.expand.bias.zero_()
        assert torch.all(dec.expand_latent(torch.rand(2, 32)) == 0.0)

    def test_positive_homogeneity_with_zero_bias(self):
        torch.manual_seed(0)
        dec = Decoder(cfg()).double()
        with torch.no_grad():
            dec.expand.bias.zero_()
        y = torch.rand(1, 32, dtype=torch.float64)
        assert torch.allclose(dec.expand_latent(3.0 * y), 3.0 * dec.expand_latent(y), atol=1e-12)

    def test_length_mismatch(self):
        dec = Decoder(cfg())
        with pytest.raises(ValueError, match="latent length"):
            dec.expand_latent(torch.rand(1, 31))


class TestCoordinateHead:
    def test_rowwise_determinism(self):
        torch.manual_seed(1)
        head = Mlp(8, 3, hidden=128)
        row = torch.rand(1, 8)
        grid = row.repeat(5, 1)
        out = head(grid)
        assert torch.allclose(out, out[0].expand_as(out))

    def test_zero_weights_constant_bias_image(self):
        torch.manual_seed(2)
        head = Mlp(8, 3, hidden=128)
        with torch.no_grad():
            head.net[0].weight.zero_()
            head.net[2].weight.zero_()
        out = head(torch.rand(4, 8))
        assert torch.allclose(out, head.net[2].bias.expand_as(out))

    def test_matches_matrix_transcription(self):
        torch.manual_seed(3)
        head = Mlp(6, 3, hidden=128).double()
        x = torch.rand(5, 6, dtype=torch.float64)
        w1 = head.net[0].weight.detach().numpy()
        b1 = head.net[0].bias.detach().numpy()
        w2 = head.net[2].weight.detach().numpy()
        b2 = head.net[2].bias.detach().numpy()
        expect = np.maximum(x.numpy() @ w1.T + b1, 0.0) @ w2.T + b2
        assert np.allclose(head(x).detach().numpy(), expect, atol=1e-12)


class TestRefinement:
    def test_identity_alpha_uniform_weights_gives_neighbor_mean(self):
        torch.manual_seed(4)
        dec = Decoder(cfg(num_points=64, n=4, d_f=4, k=3, r=50.0)).double()
        att = dec.refine
        with torch.no_grad():
            for mlp in (att.gamma, att.theta):
                for layer in (mlp.net[0], mlp.net[2]):
                    layer.weight.zero_()
                    layer.bias.zero_()
            for layer in (att.alpha.net[0], att.alpha.net[2]):
                layer.weight.copy_(torch.eye(4, dtype=torch.float64))
                layer.bias.zero_()
        xyz = torch.rand(1, 4, 3, dtype=torch.float64)
        feats = torch.rand(1, 4, 4, dtype=torch.float64)  # nonnegative: ReLU(f) = f
        out = att(xyz, feats)
        nbrs = knn_radius(xyz[0].numpy(), xyz[0].numpy(), k=3, r=50.0)
        expect = np.stack([feats[0].numpy()[nbrs[i]].mean(axis=0) for i in range(4)])
        assert np.allclose(out[0].detach().numpy(), expect, atol=1e-12)

    def test_row_permutation_equivariance(self):
        torch.manual_seed(5)
        dec = Decoder(cfg(num_points=64, n=8, d_f=8, k=4, r=50.0)).double()
        xyz = torch.rand(1, 4, 3, dtype=torch.float64)
        feats = torch.rand(1, 4, 8, dtype=torch.float64)
        out = dec.refine(xyz, feats)
        perm = torch.tensor([2, 0, 3, 1])
        out_p = dec.refine(xyz[:, perm], feats[:, perm])
        assert torch.allclose(out[:, perm], out_p, atol=1e-12)


class TestOffsetUpsampler:
    def test_fanout_and_bound(self):
        torch.manual_seed(6)
        up = OffsetUpsampler(8, branches=4, scale=0.1)
        xyz = torch.rand(2, 16, 3)
        feats = torch.randn(2, 16, 8)
        children, child_feats, disp = up(xyz, feats)
        assert children.shape == (2, 64, 3)
        assert child_feats.shape == (2, 64, 8)
        assert torch.all(disp.abs() <= 0.1)
        # children within s of parents in every component (input-major order)
        parents = xyz[:, :, None, :].expand(-1, -1, 4, -1).reshape(2, 64, 3)
        assert torch.all((children - parents).abs() <= 0.1)

    def test_zero_offsets_children_at_parent(self):
        up = OffsetUpsampler(4, branches=4, scale=0.1)
        with torch.no_grad():
            for head in up.offset_heads:
                for layer in (head.net[0], head.net[2]):
                    layer.weight.zero_()
                    layer.bias.zero_()
        xyz = torch.rand(1, 5, 3)
        children, _, _ = up(xyz, torch.randn(1, 5, 4))
        parents = xyz[:, :, None, :].expand(-1, -1, 4, -1).reshape(1, 20, 3)
        assert torch.equal(children, parents)

    def test_width_mismatch(self):
        up = OffsetUpsampler(8)
        with pytest.raises(ValueError, match="width"):
            up(torch.rand(1, 4, 3), torch.rand(1, 4, 5))


class TestDecode:
    def test_cardinality_contract(self):
        torch.manual_seed(7)
        dec = Decoder(cfg())
        out = dec(torch.rand(2, 32))
        assert out.points.shape == (2, 256, 3)
        assert out.x_initial.shape == (2, 16, 3)
        assert out.x_refined.shape == (2, 16, 3)

    def test_cardinality_for_random_parameters(self):
        for seed in range(3):
            torch.manual_seed(seed)
            dec = Decoder(cfg(num_points=64, n=8, d_f=8, k=4))
            with torch.no_grad():
                for p in dec.parameters():
                    p.add_(torch.randn_like(p))
            assert dec(torch.rand(1, 8)).points.shape == (1, 64, 3)

    def test_total_displacement_bound(self):
        torch.manual_seed(8)
        dec = Decoder(cfg(num_points=64, n=8, d_f=8, k=4))
        out = dec(torch.rand(1, 8))
        # children of stage 2 sit within 2s per component of their stage-1
        # grandparent seed coordinates
        seeds = out.x_refined[:, :, None, :].expand(-1, -1, 16, -1).reshape(1, 64, 3)
        assert torch.all((out.points - seeds).abs() <= 2 * 0.1 + 1e-6)

    def test_hybrid_coords_bypass_heads(self):
        torch.manual_seed(9)
        dec = Decoder(cfg(num_points=64, n=8, d_f=8, k=4))
        coords = torch.rand(1, 4, 3)
        out = dec(torch.rand(1, 8), coords=coords)
        assert out.x_initial is None and out.x_refined is None
        seeds = coords[:, :, None, :].expand(-1, -1, 16, -1).reshape(1, 64, 3)
        assert torch.all((out.points - seeds).abs() <= 2 * 0.1 + 1e-6)


class TestCodecEndToEnd:
    def test_round_trip_shapes(self):
        torch.manual_seed(10)
        codec = Codec(cfg(num_points=64, n=8, d_f=8, k=8)).eval()
        xyz = torch.rand(3, 64, 3)
        z, x_star, f_star = codec.encode(xyz)
        out = codec.decode(z)
        assert z.shape == (3, 8)
        assert out.points.shape == (3, 64, 3)

    def test_projection_head_round_trip(self):
        torch.manual_seed(11)
        codec = Codec(cfg(num_points=64, n=8, d_f=8, k=8,
                          head="projection", proj_t=2)).eval()
        xyz = torch.rand(2, 64, 3)
        z, _, _ = codec.encode(xyz)
        assert z.shape == (2, 8)
        assert codec.decode(z).points.shape == (2, 64, 3)
