"""Template construction and complexity-controlled instance sampling.

Training difficulty is governed by alpha: sampled instances' modulations
are linearly pulled toward the template's, starting fully collapsed
(alpha = 0, every instance IS the template) and opening up to alpha_max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError
from .fields import Modulations, RadianceGenerator


@dataclass
class CurriculumSchedule:
    """Piecewise-linear alpha ramp from 0 at step 0 to alpha_max at
    total_steps, optionally quantized into a number of discrete increments
    (the knob swept by the curriculum ablation)."""

    total_steps: int
    alpha_max: float = 0.6
    increments: int | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise DomainError("total_steps must be >= 1")
        if not (0.0 <= self.alpha_max <= 1.0):
            raise DomainError("alpha_max must lie in [0, 1]")


def alpha_at(schedule: CurriculumSchedule, step: int) -> float:
    """Blend coefficient at a training step; monotone, clamped at alpha_max."""
    if step < 0:
        raise DomainError("step must be nonnegative")
    frac = min(step / schedule.total_steps, 1.0)
    if schedule.increments:
        frac = math.floor(frac * schedule.increments) / schedule.increments
    return schedule.alpha_max * frac


@dataclass
class TemplateField:
    """The fixed intermediate field all correspondences route through:
    mean modulations, plus annotations (labels, keypoints) attached by the
    evaluation suite."""

    mods: Modulations
    annotations: dict = field(default_factory=dict)


def estimate_template(
    G: RadianceGenerator,
    n_samples: int,
    rng: np.random.Generator,
    latent_sampler=None,
) -> TemplateField:
    """Elementwise mean of map_latent over n prior draws.

    latent_sampler(rng, n) overrides the standard-normal prior (the toy
    world supplies its own standardized-parameter prior).
    """
    if n_samples < 1:
        raise DomainError("need at least one sample")
    if latent_sampler is None:
        z = torch.as_tensor(
            rng.standard_normal((n_samples, G.cfg.d_z)), dtype=next(G.parameters()).dtype
        )
    else:
        z = latent_sampler(rng, n_samples)
    with torch.no_grad():
        mods = G.map_latent(z)
    return TemplateField(Modulations(mods.gamma.mean(dim=0), mods.beta.mean(dim=0)))


def blend_modulations(inst: Modulations, template: Modulations, alpha: float) -> Modulations:
    """Linear interpolation from the template (alpha=0) to the instance
    (alpha=1), elementwise on both gamma and beta."""
    if inst.gamma.shape[-2:] != template.gamma.shape[-2:]:
        raise DomainError("modulation structures do not match")
    if not (0.0 <= alpha <= 1.0):
        raise DomainError(f"alpha {alpha} outside [0, 1]")
    return Modulations(
        template.gamma + alpha * (inst.gamma - template.gamma),
        template.beta + alpha * (inst.beta - template.beta),
    )
