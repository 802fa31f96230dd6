import math

import numpy as np
import pytest
import torch

from nerfcorr.errors import DomainError
from nerfcorr.fields import (
    ENCODING_DIM,
    DeformationConfig,
    DeformationField,
    GeneratorConfig,
    Modulations,
    RadianceGenerator,
    correspond,
    deform,
    field_jacobian,
    positional_encode,
)

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def tiny_gen():
    G = RadianceGenerator(GeneratorConfig(d_z=8, depth=4, width=16, feature_layers=(0, 1)), seed=1)
    return G


class TestPositionalEncode:
    def test_zero_input(self):
        e = positional_encode(torch.zeros(1, 3))
        assert e.shape == (1, ENCODING_DIM)
        sin_idx = [a * 16 + k for a in range(3) for k in range(8)]
        cos_idx = [a * 16 + 8 + k for a in range(3) for k in range(8)]
        assert torch.all(e[0, sin_idx] == 0.0)
        assert torch.all(e[0, cos_idx] == 1.0)

    def test_length_48(self):
        x = torch.randn(17, 3)
        assert positional_encode(x).shape == (17, 48)

    def test_unit_x_band0(self):
        e = positional_encode(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64))
        assert e[0, 0].item() == pytest.approx(math.sin(1.0), abs=1e-9)
        assert e[0, 8].item() == pytest.approx(math.cos(1.0), abs=1e-9)

    def test_band_frequencies(self):
        x = torch.tensor([[0.3, -0.2, 0.7]], dtype=torch.float64)
        e = positional_encode(x)
        for axis in range(3):
            for k in range(8):
                assert e[0, axis * 16 + k].item() == pytest.approx(
                    math.sin(2**k * x[0, axis].item()), abs=1e-12
                )

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            positional_encode(torch.tensor([[float("nan"), 0.0, 0.0]]))

    def test_injective_on_grid(self):
        # no collisions when hashing encodings of a 32^3 grid of the scene cube
        g = torch.linspace(-1.0, 1.0, 32)
        pts = torch.stack(torch.meshgrid(g, g, g, indexing="ij"), dim=-1).reshape(-1, 3)
        enc = positional_encode(pts).numpy()
        seen = {enc[i].tobytes() for i in range(enc.shape[0])}
        assert len(seen) == pts.shape[0]


class TestMapLatent:
    def test_deterministic(self, tiny_gen):
        z = torch.randn(8)
        a = tiny_gen.map_latent(z)
        b = tiny_gen.map_latent(z)
        assert torch.equal(a.gamma, b.gamma) and torch.equal(a.beta, b.beta)

    def test_layer_count_matches_depth(self, tiny_gen):
        mods = tiny_gen.map_latent(torch.randn(8))
        assert mods.num_layers == tiny_gen.cfg.depth
        assert mods.gamma.shape == (4, 16)

    def test_dimension_mismatch(self, tiny_gen):
        with pytest.raises(DomainError):
            tiny_gen.map_latent(torch.randn(5))

    def test_nonconstant_in_z(self, tiny_gen):
        z = torch.randn(8)
        z2 = z.clone()
        z2[3] += 0.5
        a = tiny_gen.map_latent(z)
        b = tiny_gen.map_latent(z2)
        assert not torch.equal(a.gamma, b.gamma) or not torch.equal(a.beta, b.beta)


class TestGeneratorQuery:
    def test_identity_affine_recurrence(self):
        # gamma=1, beta=0, W=I, b=0 for all layers: f_{i+1} = sin(f_i)
        G = RadianceGenerator(GeneratorConfig(d_z=4, depth=3, width=3, feature_layers=(0,)), seed=0)
        with torch.no_grad():
            for lin in G.trunk:
                lin.weight.copy_(torch.eye(3))
                lin.bias.zero_()
        mods = Modulations(torch.ones(3, 3), torch.zeros(3, 3))
        x = torch.tensor([[0.3, -0.7, 0.2]])
        out = G.query(x, mods)
        f = x
        for i in range(3):
            f = torch.sin(f)
            assert torch.allclose(out.features[0, i], f[0], atol=1e-6)

    def test_head_ranges(self, tiny_gen):
        mods = tiny_gen.map_latent(torch.randn(8))
        out = tiny_gen.query(torch.randn(64, 3), mods)
        assert (out.sigma >= 0).all()
        assert (out.color >= 0).all() and (out.color <= 1).all()

    def test_feature_stack_depth(self, tiny_gen):
        mods = tiny_gen.map_latent(torch.randn(8))
        out = tiny_gen.query(torch.randn(5, 3), mods)
        assert out.features.shape == (5, tiny_gen.cfg.depth, tiny_gen.cfg.width)

    def test_structural_mismatch_rejected(self, tiny_gen):
        bad = Modulations(torch.ones(2, 16), torch.zeros(2, 16))
        with pytest.raises(DomainError):
            tiny_gen.query(torch.randn(3, 3), bad)


class TestDeformationField:
    def test_zero_residual_is_exact_identity(self):
        f = DeformationField(DeformationConfig(d_z=8), seed=0).zero_residual_()
        x = torch.randn(32, 3)
        z = torch.randn(8)
        assert torch.equal(deform(f, x, z), x)

    def test_continuity(self):
        f = DeformationField(DeformationConfig(d_z=8), seed=3)
        z = torch.randn(8)
        x = torch.tensor([[0.2, -0.1, 0.4]], dtype=torch.float64)
        f = f.double()
        base = deform(f, x, z.double())
        for eps in (1e-3, 1e-5, 1e-7):
            moved = deform(f, x + eps, z.double())
            assert torch.linalg.norm(moved - base) < 1e2 * eps + 1e-9

    def test_forward_pass_matches_numpy_reimplementation(self):
        # independent duplicate of the residual MLP in plain numpy
        cfg = DeformationConfig(d_z=4, hidden=8)
        f = DeformationField(cfg, seed=7)
        x = torch.tensor([[0.1, 0.2, 0.3]])
        z = torch.tensor([0.5, -0.3, 0.2, 0.9])

        def np_softplus(a):
            return np.log1p(np.exp(-np.abs(a))) + np.maximum(a, 0.0)

        xe = x.numpy()[0]
        freqs = 2.0 ** np.arange(8)
        enc = np.concatenate(
            [np.concatenate([np.sin(freqs * c), np.cos(freqs * c)]) for c in xe]
        )
        u0 = np.concatenate([enc, z.numpy()])
        W = {n: p.detach().numpy() for n, p in f.named_parameters()}
        h = np_softplus(W["fc1.weight"] @ u0 + W["fc1.bias"])
        h = np_softplus(W["fc2.weight"] @ h + W["fc2.bias"])
        h = np_softplus(W["fc3.weight"] @ np.concatenate([h, u0]) + W["fc3.bias"])
        expected = W["fc4.weight"] @ h + W["fc4.bias"]
        got = f.residual(x, z)[0].detach().numpy()
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_correspond_identity_composition(self):
        B = DeformationField(DeformationConfig(d_z=8), seed=0).zero_residual_()
        F = DeformationField(DeformationConfig(d_z=8), seed=1).zero_residual_()
        x = torch.randn(10, 3)
        z = torch.randn(8)
        assert torch.equal(correspond(B, F, x, z, z), x)

    def test_correspond_constant_residuals(self):
        B = DeformationField(DeformationConfig(d_z=8), seed=0).zero_residual_()
        F = DeformationField(DeformationConfig(d_z=8), seed=1).zero_residual_()
        v = torch.tensor([0.1, 0.0, -0.2])
        w = torch.tensor([-0.05, 0.3, 0.0])
        with torch.no_grad():
            B.fc4.bias.copy_(v)
            F.fc4.bias.copy_(w)
        x = torch.randn(10, 3)
        z = torch.randn(8)
        assert torch.allclose(correspond(B, F, x, z, z), x + v + w, atol=1e-6)


class TestFieldJacobian:
    def test_zero_residual_zero_jacobian(self):
        f = DeformationField(DeformationConfig(d_z=8), seed=0).zero_residual_()
        J = field_jacobian(f, torch.randn(5, 3), torch.randn(8))
        assert torch.equal(J, torch.zeros(5, 3, 3))

    def test_linear_residual_recovers_matrix(self, linear_field):
        A = torch.tensor([[0.2, -0.1, 0.0], [0.05, 0.3, 0.02], [0.0, -0.4, 0.15]])
        f = linear_field(A=A)
        J = field_jacobian(f, torch.randn(7, 3), torch.randn(4))
        assert torch.allclose(J, A.expand(7, 3, 3), atol=1e-6)

    def test_pure_bias_residual_zero_jacobian(self):
        f = DeformationField(DeformationConfig(d_z=4), seed=2).zero_residual_()
        with torch.no_grad():
            f.fc4.bias.copy_(torch.tensor([0.3, -0.2, 0.1]))
        J = field_jacobian(f, torch.randn(7, 3), torch.randn(4))
        assert torch.allclose(J, torch.zeros(7, 3, 3), atol=0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_central_finite_differences(self, seed):
        # step 1e-4, float64; 25 random (x, z) pairs per seed (100 total).
        # Band-7 encoding terms put the FD truncation floor near 3e-5, so the
        # 1e-4 relative comparison is taken against the Jacobian's scale.
        cfg = DeformationConfig(d_z=6, hidden=16, last_layer_scale=0.05)
        f = DeformationField(cfg, seed=seed).double()
        rng = np.random.default_rng(seed)
        h = 1e-4
        for _ in range(25):
            x = torch.tensor(rng.uniform(-1, 1, 3), dtype=torch.float64)[None]
            z = torch.tensor(rng.standard_normal(6), dtype=torch.float64)
            J = field_jacobian(f, x, z)[0].detach().numpy()
            J_fd = np.zeros((3, 3))
            for j in range(3):
                e = torch.zeros(1, 3, dtype=torch.float64)
                e[0, j] = h
                hp = f.residual(x + e, z)[0].detach().numpy()
                hm = f.residual(x - e, z)[0].detach().numpy()
                J_fd[:, j] = (hp - hm) / (2 * h)
            scale = np.abs(J_fd).max()
            np.testing.assert_allclose(J, J_fd, rtol=1e-4, atol=1e-4 * scale)
            assert np.linalg.norm(J - J_fd) <= 1e-4 * max(np.linalg.norm(J_fd), 1e-12)


def test_jacobian_of_linear_field_via_first_order_probe():
    # residual H(x) ~ H(0) + A x near 0; the exact Jacobian at x must equal
    # the measured local linear map
    f = DeformationField(DeformationConfig(d_z=4, hidden=8), seed=11).double()
    z = torch.zeros(4, dtype=torch.float64)
    x0 = torch.tensor([[0.05, -0.02, 0.04]], dtype=torch.float64)
    A = field_jacobian(f, x0, z)[0]
    eps = 1e-6
    for j in range(3):
        e = torch.zeros(1, 3, dtype=torch.float64)
        e[0, j] = eps
        d = (f.residual(x0 + e, z) - f.residual(x0 - e, z))[0] / (2 * eps)
        assert torch.allclose(d, A[:, j], atol=1e-7)
