"""Neural field primitives.

A conditioned radiance generator (FiLM-modulated sinusoidal MLP) and the
two residual deformation fields that map instance space to template space
and back. All evaluation is pure in (parameters, inputs) and batched: points
are (*B, N, 3), modulations broadcast against the batch dims.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError

NUM_BANDS = 8
ENCODING_DIM = 3 * NUM_BANDS * 2  # 48


def positional_encode(x: torch.Tensor) -> torch.Tensor:
    """Sinusoidal encoding of 3D points, (*B, 3) -> (*B, 48).

    Layout is axis-major with sines before cosines: for axis j the block is
    [sin(2^0 x_j) .. sin(2^7 x_j), cos(2^0 x_j) .. cos(2^7 x_j)]. There is no
    raw-coordinate passthrough.
    """
    if x.shape[-1] != 3:
        raise DomainError(f"expected 3D points, got last dim {x.shape[-1]}")
    if not torch.isfinite(x).all():
        raise DomainError("positional_encode: non-finite input")
    freqs = torch.pow(2.0, torch.arange(NUM_BANDS, dtype=x.dtype, device=x.device))
    ang = x.unsqueeze(-1) * freqs  # (*B, 3, NUM_BANDS)
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (*B, 3, 2*NUM_BANDS)
    return enc.reshape(*x.shape[:-1], ENCODING_DIM)


class Modulations(NamedTuple):
    """Per-layer FiLM signals identifying one generated instance.

    gamma, beta: (*B, depth, width); entry [..., i, :] modulates trunk
    layer i as sin(gamma * (W f + b) + beta).
    """

    gamma: torch.Tensor
    beta: torch.Tensor

    @property
    def num_layers(self) -> int:
        return self.gamma.shape[-2]

    def validate_for(self, depth: int, width: int) -> None:
        if self.gamma.shape[-2:] != (depth, width) or self.beta.shape[-2:] != (depth, width):
            raise DomainError(
                f"modulations shaped {tuple(self.gamma.shape[-2:])} do not match "
                f"trunk depth {depth} width {width}"
            )

    def map(self, fn) -> "Modulations":
        return Modulations(fn(self.gamma), fn(self.beta))


class RadianceOutput(NamedTuple):
    """Generator response at query points: density (*B, N), color (*B, N, 3)
    in [0,1], features (*B, N, depth, width) or None when not requested."""

    sigma: torch.Tensor
    color: torch.Tensor
    features: torch.Tensor | None


@dataclass
class GeneratorConfig:
    d_z: int = 16
    depth: int = 6
    width: int = 48
    feature_layers: tuple = (0, 1, 2, 3, 4)
    view_dependent: bool = False
    map_hidden: int = 64
    map_depth: int = 3
    first_layer_scale: float = 25.0

    def __post_init__(self):
        self.feature_layers = tuple(self.feature_layers)
        if any(i >= self.depth for i in self.feature_layers):
            raise DomainError("feature_layers index exceeds trunk depth")


def _np_uniform_(tensor: torch.Tensor, bound: float, rng: np.random.Generator) -> None:
    vals = rng.uniform(-bound, bound, size=tuple(tensor.shape))
    with torch.no_grad():
        tensor.copy_(torch.from_numpy(vals).to(tensor.dtype))


class MappingNetwork(nn.Module):
    """Latent code -> per-layer FiLM signals (gamma, beta).

    LeakyReLU MLP; the last layer is downscaled at init so gamma starts
    near 1 and beta near 0 (identity modulation).
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.d_z] + [cfg.map_hidden] * cfg.map_depth + [2 * cfg.depth * cfg.width]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(len(dims) - 1)
        )
        for lin in self.layers:
            _np_uniform_(lin.weight, float(np.sqrt(6.0 / lin.in_features)), rng)
            _np_uniform_(lin.bias, 1e-3, rng)
        with torch.no_grad():
            self.layers[-1].weight.mul_(0.25)
            self.layers[-1].bias.zero_()

    def forward(self, z: torch.Tensor) -> Modulations:
        h = z
        for lin in self.layers[:-1]:
            h = F.leaky_relu(lin(h), 0.2)
        out = self.layers[-1](h)
        out = out.reshape(*z.shape[:-1], 2, self.cfg.depth, self.cfg.width)
        gamma = 1.0 + out[..., 0, :, :]
        beta = out[..., 1, :, :]
        return Modulations(gamma, beta)


class RadianceGenerator(nn.Module):
    """FiLM-modulated sinusoidal MLP mapping (point, modulations[, view
    direction]) -> (density, color, per-layer features).

    Trunk layer i computes f_{i+1} = sin(gamma_i * (W_i f_i + b_i) + beta_i);
    features are the trunk activations, recorded before any view-direction
    injection. The density head is a softplus, the color head a logistic
    squashing, which guarantee sigma >= 0 and color in [0, 1]^3.
    """

    def __init__(self, cfg: GeneratorConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xF1E1D,)))
        self.mapping = MappingNetwork(cfg, rng, dtype=dtype)
        dims = [3] + [cfg.width] * cfg.depth
        self.trunk = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(cfg.depth)
        )
        _np_uniform_(self.trunk[0].weight, cfg.first_layer_scale / 3.0, rng)
        _np_uniform_(self.trunk[0].bias, np.pi, rng)
        for lin in self.trunk[1:]:
            _np_uniform_(lin.weight, float(np.sqrt(6.0 / lin.in_features)), rng)
            _np_uniform_(lin.bias, 0.5, rng)
        self.sigma_head = nn.Linear(cfg.width, 1, dtype=dtype)
        color_in = cfg.width + (3 if cfg.view_dependent else 0)
        self.color_hidden = nn.Linear(color_in, cfg.width, dtype=dtype)
        self.color_out = nn.Linear(cfg.width, 3, dtype=dtype)
        for lin in (self.sigma_head, self.color_hidden, self.color_out):
            _np_uniform_(lin.weight, float(np.sqrt(6.0 / lin.in_features)), rng)
            _np_uniform_(lin.bias, 0.1, rng)
        with torch.no_grad():
            self.sigma_head.bias.fill_(-1.0)

    @property
    def d_z(self) -> int:
        return self.cfg.d_z

    def map_latent(self, z: torch.Tensor) -> Modulations:
        """Deterministic mapping z -> Modulations for this generator."""
        if z.shape[-1] != self.cfg.d_z:
            raise DomainError(f"latent dim {z.shape[-1]} != configured d_z {self.cfg.d_z}")
        if not torch.isfinite(z).all():
            raise DomainError("map_latent: non-finite latent")
        return self.mapping(z)

    def query(
        self,
        x: torch.Tensor,
        mods: Modulations,
        d: torch.Tensor | None = None,
        need_features: bool = True,
        need_color: bool = True,
    ) -> RadianceOutput:
        """Evaluate the field at points x (*B, N, 3).

        mods gamma/beta are (*B', depth, width) with *B' broadcastable
        against *B. When the generator is view dependent, d holds unit view
        directions broadcastable with x; it only enters the color head.
        """
        mods.validate_for(self.cfg.depth, self.cfg.width)
        if not torch.isfinite(x).all():
            raise DomainError("generator_query: non-finite points")
        feats = [] if need_features else None
        h = x
        for i, lin in enumerate(self.trunk):
            g = mods.gamma[..., i, :].unsqueeze(-2)
            b = mods.beta[..., i, :].unsqueeze(-2)
            h = torch.sin(g * lin(h) + b)
            if need_features:
                feats.append(h)
        sigma = F.softplus(self.sigma_head(h).squeeze(-1))
        if need_color:
            cin = h
            if self.cfg.view_dependent:
                if d is None:
                    d = torch.zeros_like(x)
                cin = torch.cat([cin, d.expand_as(x)], dim=-1)
            color = torch.sigmoid(self.color_out(torch.sin(self.color_hidden(cin))))
        else:
            color = None
        features = torch.stack(feats, dim=-2) if need_features else None
        return RadianceOutput(sigma, color, features)

    def parameter_hash(self) -> str:
        """Content hash of all parameters + config, for checkpoint guards."""
        import hashlib

        h = hashlib.sha256()
        h.update(repr(self.cfg).encode())
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


@dataclass
class DeformationConfig:
    d_z: int = 16
    hidden: int = 64
    last_layer_scale: float = 0.005


class DeformationField(nn.Module):
    """Residual deformation x -> x + H(phi(x), z).

    H is an MLP of four fully-connected layers on the 48-dim positional
    encoding concatenated with the conditioning code, with a skip
    reinjecting the input at the third layer. Softplus activations keep the
    map smooth so Jacobians are well defined everywhere.
    """

    def __init__(self, cfg: DeformationConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xDEF0,)))
        in_dim = ENCODING_DIM + cfg.d_z
        self.fc1 = nn.Linear(in_dim, cfg.hidden, dtype=dtype)
        self.fc2 = nn.Linear(cfg.hidden, cfg.hidden, dtype=dtype)
        self.fc3 = nn.Linear(cfg.hidden + in_dim, cfg.hidden, dtype=dtype)
        self.fc4 = nn.Linear(cfg.hidden, 3, dtype=dtype)
        for lin in (self.fc1, self.fc2, self.fc3):
            _np_uniform_(lin.weight, float(np.sqrt(6.0 / lin.in_features)), rng)
            _np_uniform_(lin.bias, 0.1, rng)
        _np_uniform_(self.fc4.weight, cfg.last_layer_scale, rng)
        with torch.no_grad():
            self.fc4.bias.zero_()

    def zero_residual_(self) -> "DeformationField":
        """Zero the output layer so the field is exactly the identity."""
        with torch.no_grad():
            self.fc4.weight.zero_()
            self.fc4.bias.zero_()
        return self

    def residual(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """H(phi(x), z): the offset added to x. x (*B, 3), z broadcastable (*B, d_z)."""
        if z.shape[-1] != self.cfg.d_z:
            raise DomainError(f"conditioning dim {z.shape[-1]} != configured {self.cfg.d_z}")
        enc = positional_encode(x)
        while z.dim() < enc.dim():
            z = z.unsqueeze(-2)
        z = z.expand(*enc.shape[:-1], z.shape[-1])
        u0 = torch.cat([enc, z], dim=-1)
        h = F.softplus(self.fc1(u0))
        h = F.softplus(self.fc2(h))
        h = F.softplus(self.fc3(torch.cat([h, u0], dim=-1)))
        return self.fc4(h)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return x + self.residual(x, z)


def deform(field: DeformationField, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Apply the full map x -> x + H(phi(x), z)."""
    return field(x, z)


def correspond(
    backward: DeformationField,
    forward: DeformationField,
    x_s: torch.Tensor,
    z_s: torch.Tensor,
    z_t: torch.Tensor,
) -> torch.Tensor:
    """Source-space points to target-space points through the template."""
    return forward(backward(x_s, z_s), z_t)


def field_jacobian(
    field: DeformationField,
    x: torch.Tensor,
    z: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Exact Jacobian of the residual H w.r.t. x, shape (*B, 3, 3).

    Row k holds dH_k/dx. The Jacobian of the full map is this plus the
    identity; penalizing the residual keeps the identity deformation at zero
    smoothness cost.
    """
    with torch.enable_grad():
        x = x.detach().requires_grad_(True)
        h = field.residual(x, z)
        rows = [
            torch.autograd.grad(
                h[..., k].sum(), x, create_graph=create_graph, retain_graph=True
            )[0]
            for k in range(3)
        ]
    return torch.stack(rows, dim=-2)
