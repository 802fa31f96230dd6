"""Training objectives for the dual deformation fields.

All five terms operate on point sets sampled near object surfaces, each
point carrying its transmittance as an importance weight. Descriptors are
unit-normalized concatenations of early generator-layer features, so the
squared-distance form 0.5 * ||u - v||^2 equals 1 - cos(u, v). Nested
averaging is per-instance first, then across instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError, TrainingStepError
from .fields import DeformationField, Modulations, RadianceGenerator, field_jacobian

DESC_EPS = 1e-8


@dataclass
class LossWeights:
    """Balancing coefficients for the total objective plus the smoothness
    slack. Defaults follow the methods-profile (1, 0.1, 1e-4)."""

    lambda_cycle: float = 1.0
    lambda_cycle_2nd: float = 0.1
    lambda_smooth: float = 1e-4
    epsilon_smooth: float = 0.05

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_cycle_2nd", "lambda_smooth", "epsilon_smooth"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")


@dataclass
class PointSet:
    """Points with transmittance weights, owned by one sampled instance.

    points (N, 3); weights (N,) in [0, 1]; z is the conditioning latent fed
    to the deformation fields; mods are the (possibly curriculum-blended)
    modulations the points were sampled under. For template-side sets the
    points/weights live on the template while z/mods identify the paired
    target instance.
    """

    points: torch.Tensor
    weights: torch.Tensor
    z: torch.Tensor
    mods: Modulations

    def __post_init__(self):
        if self.points.shape[0] != self.weights.shape[0]:
            raise DomainError("points and weights disagree in length")


def descriptor(
    G: RadianceGenerator,
    x: torch.Tensor,
    mods: Modulations,
    layer_set=None,
) -> torch.Tensor:
    """Unit-norm geometric descriptor at points x (N, 3) -> (N, L*width).

    Features of each selected trunk layer are L2-normalized independently,
    concatenated, and normalized again; a zero feature vector hits the
    epsilon floor instead of dividing by zero.
    """
    layers = tuple(layer_set) if layer_set is not None else G.cfg.feature_layers
    feats = G.query(x, mods, need_color=False).features  # (N, depth, width)
    sel = feats[..., layers, :]
    sel = F.normalize(sel, dim=-1, eps=DESC_EPS)
    flat = sel.reshape(*sel.shape[:-2], len(layers) * G.cfg.width)
    return F.normalize(flat, dim=-1, eps=DESC_EPS)


def _weighted_desc_gap(d_a: torch.Tensor, d_b: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (w * 0.5 * ((d_a - d_b) ** 2).sum(dim=-1)).mean()


def loss_sim_backward(
    G: RadianceGenerator,
    B: DeformationField,
    sources: list[PointSet],
    template_mods: Modulations,
    layer_set=None,
) -> torch.Tensor:
    """Feature similarity between source points and their backward-deformed
    template correspondents, transmittance weighted, averaged per instance
    then across instances."""
    if not sources:
        raise DomainError("empty source batch")
    terms = []
    for ps in sources:
        d_src = descriptor(G, ps.points, ps.mods, layer_set)
        d_tpl = descriptor(G, B(ps.points, ps.z), template_mods, layer_set)
        terms.append(_weighted_desc_gap(d_src, d_tpl, ps.weights))
    return torch.stack(terms).mean()


def loss_sim_forward(
    G: RadianceGenerator,
    Ffield: DeformationField,
    targets: list[PointSet],
    template_mods: Modulations,
    layer_set=None,
) -> torch.Tensor:
    """Mirror of the backward similarity: template points deformed toward
    each target, compared against the target's own features."""
    if not targets:
        raise DomainError("empty target batch")
    terms = []
    for ps in targets:
        d_tpl = descriptor(G, ps.points, template_mods, layer_set)
        d_tgt = descriptor(G, Ffield(ps.points, ps.z), ps.mods, layer_set)
        terms.append(_weighted_desc_gap(d_tpl, d_tgt, ps.weights))
    return torch.stack(terms).mean()


def loss_cycle(
    B: DeformationField,
    Ffield: DeformationField,
    sources: list[PointSet],
    targets: list[PointSet],
) -> torch.Tensor:
    """Round trips through the template land back on the inputs:
    F(B(x_s, z_s), z_s) ~ x_s and B(F(x_0, z_t), z_t) ~ x_0."""
    src = torch.stack(
        [((Ffield(B(ps.points, ps.z), ps.z) - ps.points) ** 2).sum(dim=-1).mean() for ps in sources]
    ).mean()
    tpl = torch.stack(
        [((B(Ffield(ps.points, ps.z), ps.z) - ps.points) ** 2).sum(dim=-1).mean() for ps in targets]
    ).mean()
    return src + tpl


def loss_cycle_second(
    G: RadianceGenerator,
    B: DeformationField,
    Ffield: DeformationField,
    sources: list[PointSet],
    paired_targets: list[tuple[torch.Tensor, Modulations]],
    layer_set=None,
) -> torch.Tensor:
    """Feature-space cross-instance cycle: source points pushed through the
    template into a paired target keep their descriptors."""
    if len(sources) != len(paired_targets):
        raise DomainError("each source instance needs one paired target")
    terms = []
    for ps, (z_t, mods_t) in zip(sources, paired_targets):
        d_src = descriptor(G, ps.points, ps.mods, layer_set)
        x_t = Ffield(B(ps.points, ps.z), z_t)
        d_tgt = descriptor(G, x_t, mods_t, layer_set)
        terms.append(_weighted_desc_gap(d_tgt, d_src, ps.weights))
    return torch.stack(terms).mean()


def smoothness_term(
    field: DeformationField,
    point_sets: list[PointSet],
    eps: float,
    full_map: bool = False,
    create_graph: bool = True,
) -> torch.Tensor:
    """Hinged squared Frobenius norm of the field's Jacobian, averaged per
    set then across sets. By default the residual's Jacobian is penalized
    (identity deformation costs nothing); full_map adds the identity."""
    terms = []
    for ps in point_sets:
        J = field_jacobian(field, ps.points, ps.z, create_graph=create_graph)
        if full_map:
            J = J + torch.eye(3, dtype=J.dtype, device=J.device)
        sq = (J**2).sum(dim=(-2, -1))
        terms.append(F.relu(sq - eps).mean())
    return torch.stack(terms).mean()


def loss_smooth(
    B: DeformationField,
    Ffield: DeformationField,
    sources: list[PointSet],
    targets: list[PointSet],
    eps: float,
    full_map: bool = False,
    create_graph: bool = True,
) -> torch.Tensor:
    return smoothness_term(B, sources, eps, full_map, create_graph) + smoothness_term(
        Ffield, targets, eps, full_map, create_graph
    )


def loss_total(components: dict, weights: LossWeights):
    """Weighted sum of the five components; raises TrainingStepError naming
    the first non-finite component. Returns (total, components + total)."""
    for name, value in components.items():
        if not torch.isfinite(value):
            raise TrainingStepError(f"non-finite loss component {name}", component=name)
    total = (
        components["sim_f"]
        + components["sim_b"]
        + weights.lambda_cycle * components["cycle"]
        + weights.lambda_cycle_2nd * components["cycle2"]
        + weights.lambda_smooth * components["smooth"]
    )
    out = dict(components)
    out["total"] = total
    return total, out
