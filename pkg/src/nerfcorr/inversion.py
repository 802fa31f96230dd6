"""Optimization-based projection of rendered images into the frozen
generator's free modulation space and into the deformation-condition space.

No encoders: each image is inverted by gradient descent on its own codes.
Stage one fits per-layer modulations (initialized at the template's, i.e.
offsets of the mean) against pixel loss plus an optional projected-feature
reconstruction term; stage two fits the single code fed to both deformation
fields so that self texture transfer reproduces the image, regularized
toward sampled synthetic anchor codes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .curriculum import TemplateField
from .errors import DomainError
from .fields import DeformationField, Modulations, RadianceGenerator
from .rendering import (
    CameraPose,
    SamplingConfig,
    generate_rays,
    render_rays,
    transmittance,
)
from .seeding import substream


def pixel_l2(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean per-pixel Euclidean RGB distance."""
    return float(torch.linalg.norm(a - b, dim=-1).mean())


@dataclass
class InversionConfig:
    iters: int = 500
    lr: float = 2e-2
    stop_tol: float = 1e-4
    lambda_feat: float = 0.1
    feature_layer: int = 2
    lambda_reg: float = 0.1
    n_anchors: int = 24
    seed: int = 0


@dataclass
class InversionResult:
    """Free per-layer modulations recovered for one image, with the final
    evaluation reconstruction error and the number of update steps used."""

    mods: Modulations
    recon_error: float
    iterations: int

    def __post_init__(self):
        if self.recon_error < 0:
            raise DomainError("negative reconstruction error")


@dataclass
class ConditionInversionResult:
    code: torch.Tensor
    recon_error: float
    iterations: int


def invert_latent(
    G: RadianceGenerator,
    image: torch.Tensor,
    pose: CameraPose,
    config: InversionConfig,
    sampling: SamplingConfig,
    template: TemplateField,
    init_mods: Modulations | None = None,
    target_features: torch.Tensor | None = None,
) -> InversionResult:
    """Fit free modulations so the render matches the image at the known pose.

    Optimizes pixel MSE plus, when the target's projected feature map is
    available (synthetic protocol), a feature-map reconstruction term. The
    best iterate under the tracked loss is returned; its reported error is
    the mean per-pixel L2 of a fresh render.
    """
    init = init_mods or template.mods
    gamma = init.gamma.detach().clone().requires_grad_(True)
    beta = init.beta.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([gamma, beta], lr=config.lr)
    target = image.reshape(-1, 3)
    best = (float("inf"), Modulations(gamma.detach().clone(), beta.detach().clone()))
    used = 0
    for it in range(config.iters + 1):
        rng = substream(config.seed, "invert", it)
        rays = generate_rays(pose, sampling.near, sampling.far, sampling.bounding_radius)
        feature_layer = config.feature_layer if target_features is not None else None
        out = render_rays(G, Modulations(gamma, beta), rays, sampling, rng, feature_layer=feature_layer)
        rgb = out[0]
        loss = ((rgb - target) ** 2).mean()
        if target_features is not None:
            feat = out[3]
            loss = loss + config.lambda_feat * ((feat - target_features.reshape(feat.shape)) ** 2).mean()
        val = float(loss)
        if val < best[0]:
            best = (val, Modulations(gamma.detach().clone(), beta.detach().clone()))
        err_now = pixel_l2(rgb.detach(), target)
        if err_now < config.stop_tol or it == config.iters:
            used = it
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        used = it + 1
    mods = best[1]
    with torch.no_grad():
        rays = generate_rays(pose, sampling.near, sampling.far, sampling.bounding_radius)
        rgb, _, _ = render_rays(G, mods, rays, sampling, substream(config.seed, "invert-eval"))
    return InversionResult(mods, pixel_l2(rgb, target), used)


def sample_anchors(
    G: RadianceGenerator,
    latent_sampler,
    pose: CameraPose,
    sampling: SamplingConfig,
    config: InversionConfig,
):
    """Synthetic (code, image) pairs anchoring the latent regularizer."""
    rng = substream(config.seed, "anchors")
    z = latent_sampler(rng, config.n_anchors)
    images = []
    with torch.no_grad():
        mods = G.map_latent(z)
        for k in range(config.n_anchors):
            rays = generate_rays(pose, sampling.near, sampling.far, sampling.bounding_radius)
            rgb, _, _ = render_rays(
                G, Modulations(mods.gamma[k], mods.beta[k]), rays, sampling,
                substream(config.seed, "anchors", k),
            )
            images.append(rgb)
    return z, torch.stack(images)


def invert_deformation_conditions(
    G: RadianceGenerator,
    B: DeformationField,
    Ffield: DeformationField,
    image: torch.Tensor,
    pose: CameraPose,
    inverted_mods: Modulations,
    config: InversionConfig,
    sampling: SamplingConfig,
    anchors=None,
    init_code: torch.Tensor | None = None,
) -> ConditionInversionResult:
    """Fit the shared code fed to both deformation fields.

    Self texture transfer with the recovered geometry must reproduce the
    image: density and sampling come from inverted_mods (fixed), color is
    pulled through F(B(x, c), c). Loss restricts to foreground rays (the
    cycle leaves background untouched) and adds lambda_reg ||c - c_anchor||^2
    toward the synthetic anchor whose image best matches the input.
    """
    target = image.reshape(-1, 3)
    with torch.no_grad():
        rng = substream(config.seed, "cond-sampling")
        rays = generate_rays(pose, sampling.near, sampling.far, sampling.bounding_radius)
        from .evaluation import _hierarchical

        t_u, x_u, sigma, _ = _hierarchical(G, inverted_mods, rays, sampling, rng, need_color=False)
        delta = torch.cat([t_u.diff(dim=-1), rays.far - t_u[:, -1:]], dim=-1)
        _, w = transmittance(sigma, delta)
        fg = w.sum(dim=-1) >= 0.25
    x_fg = x_u[fg]
    w_fg = w[fg]
    tgt_fg = target[fg]
    code = (init_code.detach().clone() if init_code is not None else torch.zeros(G.cfg.d_z)).requires_grad_(True)
    reg_anchor = None
    if anchors is not None and config.lambda_reg > 0:
        z_anchors, anchor_imgs = anchors
        gaps = torch.linalg.norm(anchor_imgs - image.reshape(1, -1, 3), dim=-1).mean(dim=-1)
        reg_anchor = z_anchors[int(gaps.argmin())]
    opt = torch.optim.Adam([code], lr=config.lr)
    best = (float("inf"), code.detach().clone())
    used = 0
    for it in range(config.iters + 1):
        x0 = B(x_fg.reshape(-1, 3), code)
        xt = Ffield(x0, code)
        color = G.query(xt.reshape(x_fg.shape), inverted_mods, need_features=False).color
        rgb = (w_fg[..., None] * color).sum(dim=-2)
        loss = ((rgb - tgt_fg) ** 2).mean()
        if reg_anchor is not None:
            loss = loss + config.lambda_reg * ((code - reg_anchor) ** 2).sum()
        recon = pixel_l2(rgb.detach(), tgt_fg)
        if float(loss) < best[0]:
            best = (float(loss), code.detach().clone())
        if recon < config.stop_tol or it == config.iters:
            used = it
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        used = it + 1
    code = best[1]
    with torch.no_grad():
        x0 = B(x_fg.reshape(-1, 3), code)
        xt = Ffield(x0, code)
        color = G.query(xt.reshape(x_fg.shape), inverted_mods, need_features=False).color
        rgb = (w_fg[..., None] * color).sum(dim=-2)
    return ConditionInversionResult(code, pixel_l2(rgb, tgt_fg), used)
