"""The distillation loop.

Each iteration samples batches of source and target latents, pulls their
modulations toward the template per the curriculum, harvests transmittance-
weighted point sets from low-res probe renders, assembles the five losses,
and applies an adaptive-moment update to the two deformation fields only.
The generator stays frozen throughout. All per-iteration randomness comes
from a (seed, iteration) substream, so training is resumable bit-exactly
from any checkpoint without serializing generator state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .curriculum import CurriculumSchedule, TemplateField, alpha_at, blend_modulations
from .errors import CheckpointError, DomainError, EmptyForegroundError, TrainingStepError
from .fields import DeformationConfig, DeformationField, Modulations, RadianceGenerator
from .losses import (
    LossWeights,
    PointSet,
    loss_cycle,
    loss_cycle_second,
    loss_sim_backward,
    loss_sim_forward,
    loss_smooth,
    loss_total,
)
from .rendering import (
    SamplingConfig,
    generate_rays,
    importance_depths,
    look_at,
    select_foreground_rays,
    stratified_depths,
    transmittance,
)
from .seeding import substream
from . import arrayio

CHECKPOINT_VERSION = 2


@dataclass
class TrainConfig:
    """Distillation hyperparameters. Defaults mirror the reference training
    protocol (face-scale); the desk profile overrides them."""

    lr: float = 5e-5
    decay_every: int = 5000
    decay_gamma: float = 0.5
    total_iters: int = 80000
    n_source: int = 10
    n_target: int = 10
    ray_steps: int = 24
    depth_mask: float = 1.08
    sampling_ratio: float = 0.2
    batch_size: int = 131072
    probe_res: int = 64
    cam_radius: float = 2.0
    cam_elev_deg: float = 25.0
    fov_deg: float = 50.0
    min_opacity: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: CurriculumSchedule | None = None
    layer_set: tuple | None = None
    deformation_hidden: int = 64
    seed: int = 0
    checkpoint_every: int = 1000
    condition_on_blended_latent: bool = False
    jacobian_full_map: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.decay_gamma <= 0:
            raise DomainError("rates must be positive")
        if self.n_source < 1 or self.n_target < 1:
            raise DomainError("batch counts must be >= 1")
        if self.schedule is None:
            self.schedule = CurriculumSchedule(total_steps=self.total_iters)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(ray_steps=self.ray_steps)


def lr_at(config: TrainConfig, step: int) -> float:
    """Stepwise-decayed learning rate: lr * gamma^floor(step / decay_every)."""
    if step < 0:
        raise DomainError("step must be nonnegative")
    return config.lr * config.decay_gamma ** (step // config.decay_every)


@dataclass
class LossRecord:
    iteration: int
    sim_b: float
    sim_f: float
    cycle: float
    cycle2: float
    smooth: float
    total: float
    alpha: float
    lr: float

    FIELDS = ("iteration", "L_sim_B", "L_sim_F", "L_cycle", "L_cycle2", "L_smooth", "L_total", "alpha", "lr")

    def row(self):
        return [
            self.iteration,
            repr(self.sim_b),
            repr(self.sim_f),
            repr(self.cycle),
            repr(self.cycle2),
            repr(self.smooth),
            repr(self.total),
            repr(self.alpha),
            repr(self.lr),
        ]


@dataclass
class DistillState:
    backward: DeformationField
    forward: DeformationField
    template: TemplateField
    optimizer: torch.optim.Adam
    config: TrainConfig
    generator_hash: str
    step: int = 0
    log: list = field(default_factory=list)


def init_state(config: TrainConfig, G: RadianceGenerator, template: TemplateField) -> DistillState:
    dcfg = DeformationConfig(d_z=G.cfg.d_z, hidden=config.deformation_hidden)
    B = DeformationField(dcfg, seed=config.seed * 2 + 1)
    F = DeformationField(dcfg, seed=config.seed * 2 + 2)
    opt = torch.optim.Adam(
        list(B.parameters()) + list(F.parameters()), lr=config.lr, betas=(0.9, 0.999), eps=1e-8
    )
    return DistillState(B, F, template, opt, config, G.parameter_hash())


def _sample_pose(config: TrainConfig, rng: np.random.Generator, res: int | None = None):
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = np.radians(rng.uniform(-config.cam_elev_deg, config.cam_elev_deg))
    pos = config.cam_radius * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    )
    r = res or config.probe_res
    return look_at(pos, fov_deg=config.fov_deg, height=r, width=r)


@dataclass
class CoarseProbe:
    """Cached coarse pass of one instance: ray bundle, stratified depths,
    compositing weights, expected depth and opacity per ray."""

    rays: object
    t: torch.Tensor
    w: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor


def _probe_stats(t_c, w_c):
    opacity = w_c.sum(dim=-1)
    depth = (w_c * t_c).sum(dim=-1) / opacity.clamp_min(1e-8)
    return depth, opacity


def coarse_probe(G, mods: Modulations, pose, config: TrainConfig, rng) -> CoarseProbe:
    rays = generate_rays(pose)
    with torch.no_grad():
        t_c = stratified_depths(rays.near, rays.far, config.ray_steps, len(rays), rng)
        x_c = rays.origins[:, None, :] + t_c[..., None] * rays.directions[:, None, :]
        sigma_c = G.query(x_c, mods, need_features=False, need_color=False).sigma
        delta_c = torch.cat([t_c.diff(dim=-1), rays.far - t_c[:, -1:]], dim=-1)
        _, w_c = transmittance(sigma_c, delta_c)
    depth, opacity = _probe_stats(t_c, w_c)
    return CoarseProbe(rays, t_c, w_c, depth, opacity)


def coarse_probe_batch(G, mods: Modulations, poses, config: TrainConfig, rng) -> list:
    """Coarse-probe several instances in one generator call.

    mods gamma/beta are (B, L, W); one pose per instance. The stratified
    jitter is drawn in a single (B*R, C) block, instance-major.
    """
    bundles = [generate_rays(p) for p in poses]
    n_inst = len(bundles)
    n_rays = len(bundles[0])
    with torch.no_grad():
        t_c = stratified_depths(
            bundles[0].near, bundles[0].far, config.ray_steps, n_inst * n_rays, rng
        ).reshape(n_inst, n_rays, config.ray_steps)
        o = torch.stack([b.origins for b in bundles])
        d = torch.stack([b.directions for b in bundles])
        x_c = o[:, :, None, :] + t_c[..., None] * d[:, :, None, :]
        flat = x_c.reshape(n_inst, -1, 3)
        sigma = G.query(flat, mods, need_features=False, need_color=False).sigma
        sigma = sigma.reshape(n_inst, n_rays, config.ray_steps)
        delta = torch.cat(
            [t_c.diff(dim=-1), bundles[0].far - t_c[..., -1:]], dim=-1
        )
        _, w_c = transmittance(sigma, delta)
    probes = []
    for i, b in enumerate(bundles):
        depth, opacity = _probe_stats(t_c[i], w_c[i])
        probes.append(CoarseProbe(b, t_c[i], w_c[i], depth, opacity))
    return probes


def harvest_point_set(
    G,
    mods: Modulations,
    z: torch.Tensor,
    probe: CoarseProbe,
    config: TrainConfig,
    rng: np.random.Generator,
    max_rays: int,
) -> PointSet:
    """Foreground selection + importance-sampled fine points from a probe.

    Per-sample transmittance is evaluated over the coarse/fine union; the
    returned points are the fine samples only.
    """
    rays = probe.rays
    n_c = config.ray_steps
    with torch.no_grad():
        idx = select_foreground_rays(
            probe.depth, probe.opacity, config.depth_mask, config.sampling_ratio, rng,
            max_rays=max_rays, min_opacity=config.min_opacity,
        )
        sel = rays.select(idx)
        t_f = importance_depths(rays.near, rays.far, probe.w[idx], config.ray_steps, rng)
        t_u, order = torch.sort(torch.cat([probe.t[idx], t_f], dim=-1), dim=-1)
        x_u = sel.origins[:, None, :] + t_u[..., None] * sel.directions[:, None, :]
        sigma_u = G.query(x_u, mods, need_features=False, need_color=False).sigma
        delta_u = torch.cat([t_u.diff(dim=-1), rays.far - t_u[:, -1:]], dim=-1)
        T_u, _ = transmittance(sigma_u, delta_u)
        fine_mask = order >= n_c
        T_f = T_u[fine_mask].reshape(len(idx), config.ray_steps)
        t_fine = t_u[fine_mask].reshape(len(idx), config.ray_steps)
        x_f = sel.origins[:, None, :] + t_fine[..., None] * sel.directions[:, None, :]
    return PointSet(
        points=x_f.reshape(-1, 3),
        weights=T_f.reshape(-1),
        z=z,
        mods=mods,
    )


def sample_point_set(
    G: RadianceGenerator,
    mods: Modulations,
    z: torch.Tensor,
    pose,
    config: TrainConfig,
    rng: np.random.Generator,
    max_rays: int,
) -> PointSet:
    """Probe-render one instance and harvest a transmittance-weighted point set."""
    return harvest_point_set(G, mods, z, coarse_probe(G, mods, pose, config, rng), config, rng, max_rays)


def distill_step(state: DistillState, G: RadianceGenerator, rng: np.random.Generator, latent_sampler):
    """One training iteration; returns the loss record.

    Raises TrainingStepError on a non-finite loss. An instance whose probe
    finds no foreground is re-posed once and then skipped.
    """
    cfg = state.config
    alpha = alpha_at(cfg.schedule, state.step)
    z_s = latent_sampler(rng, cfg.n_source)
    z_t = latent_sampler(rng, cfg.n_target)
    with torch.no_grad():
        mods_s = blend_modulations(G.map_latent(z_s), state.template.mods, alpha)
        mods_t = blend_modulations(G.map_latent(z_t), state.template.mods, alpha)
    if cfg.condition_on_blended_latent:
        z_s = alpha * z_s
        z_t = alpha * z_t
    max_rays = max(1, cfg.batch_size // (cfg.ray_steps * (cfg.n_source + cfg.n_target)))

    # coarse-probe all sources in one generator call; one-retry-then-skip on
    # instances whose probe finds no foreground
    poses = [_sample_pose(cfg, rng) for _ in range(cfg.n_source)]
    probes = coarse_probe_batch(G, mods_s, poses, cfg, rng)
    sources: list[PointSet] = []
    for i in range(cfg.n_source):
        mi = Modulations(mods_s.gamma[i], mods_s.beta[i])
        probe = probes[i]
        for attempt in range(2):
            try:
                sources.append(harvest_point_set(G, mi, z_s[i], probe, cfg, rng, max_rays))
                break
            except EmptyForegroundError:
                if attempt == 0:
                    probe = coarse_probe(G, mi, _sample_pose(cfg, rng), cfg, rng)
    # template-side sets: the template probe is shared across targets, fine
    # points are resampled per target
    targets: list[PointSet] = []
    probe0 = coarse_probe(G, state.template.mods, _sample_pose(cfg, rng), cfg, rng)
    for j in range(cfg.n_target):
        mj = Modulations(mods_t.gamma[j], mods_t.beta[j])
        for attempt in range(2):
            try:
                ps = harvest_point_set(G, state.template.mods, z_t[j], probe0, cfg, rng, max_rays)
                targets.append(replace(ps, mods=mj))
                break
            except EmptyForegroundError:
                if attempt == 0:
                    probe0 = coarse_probe(
                        G, state.template.mods, _sample_pose(cfg, rng), cfg, rng
                    )
    if not sources or not targets:
        raise TrainingStepError("all instances lost their foreground", component="foreground")

    layer_set = cfg.layer_set or G.cfg.feature_layers
    paired = [
        (targets[i % len(targets)].z, targets[i % len(targets)].mods) for i in range(len(sources))
    ]
    components = {
        "sim_b": loss_sim_backward(G, state.backward, sources, state.template.mods, layer_set),
        "sim_f": loss_sim_forward(G, state.forward, targets, state.template.mods, layer_set),
        "cycle": loss_cycle(state.backward, state.forward, sources, targets),
        "cycle2": loss_cycle_second(G, state.backward, state.forward, sources, paired, layer_set),
        "smooth": loss_smooth(
            state.backward, state.forward, sources, targets,
            cfg.weights.epsilon_smooth, full_map=cfg.jacobian_full_map,
        ),
    }
    total, comps = loss_total(components, cfg.weights)
    lr = lr_at(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    record = LossRecord(
        iteration=state.step,
        sim_b=float(comps["sim_b"].detach()),
        sim_f=float(comps["sim_f"].detach()),
        cycle=float(comps["cycle"].detach()),
        cycle2=float(comps["cycle2"].detach()),
        smooth=float(comps["smooth"].detach()),
        total=float(comps["total"].detach()),
        alpha=float(alpha),
        lr=float(lr),
    )
    state.step += 1
    state.log.append(record)
    return record


def write_log(path, records) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(LossRecord.FIELDS)
        for r in records:
            w.writerow(r.row())


def run_distillation(
    config: TrainConfig,
    G: RadianceGenerator,
    template: TemplateField,
    latent_sampler,
    out_dir=None,
    state: DistillState | None = None,
    progress=None,
):
    """Loop distill_step to total_iters with periodic checkpoints.

    Returns (backward field, forward field, loss records). Pass a loaded
    state to resume; randomness is a pure function of (seed, iteration) so
    resumed runs match uninterrupted ones exactly.
    """
    state = state or init_state(config, G, template)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    pending = []
    while state.step < config.total_iters:
        rng = substream(config.seed, "iter", state.step)
        rec = distill_step(state, G, rng, latent_sampler)
        pending.append(rec)
        if progress is not None:
            progress(rec)
        if out_dir is not None and (
            state.step % config.checkpoint_every == 0 or state.step == config.total_iters
        ):
            write_log(out_dir / "losses.csv", pending)
            pending = []
            save_checkpoint(state, out_dir / "checkpoint.nac")
    if out_dir is not None:
        if pending:
            write_log(out_dir / "losses.csv", pending)
        save_checkpoint(state, out_dir / "checkpoint.nac")
    return state.backward, state.forward, state.log


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    return {
        f"{prefix}.{name}": p.detach().cpu().numpy() for name, p in module.named_parameters()
    }


def save_checkpoint(state: DistillState, path) -> None:
    """Serialize fields, template, optimizer moments, and config."""
    arrays = {}
    arrays.update(_module_arrays("B", state.backward))
    arrays.update(_module_arrays("F", state.forward))
    arrays["template.gamma"] = state.template.mods.gamma.detach().cpu().numpy()
    arrays["template.beta"] = state.template.mods.beta.detach().cpu().numpy()
    opt_steps = {}
    params = list(state.backward.parameters()) + list(state.forward.parameters())
    for i, p in enumerate(params):
        st = state.optimizer.state.get(p)
        if st:
            arrays[f"opt.{i}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            arrays[f"opt.{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
            opt_steps[str(i)] = float(st["step"])
    cfg = asdict(state.config)
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.step,
        "generator_hash": state.generator_hash,
        "config": cfg,
        "opt_steps": opt_steps,
    }
    arrayio.save_arrays(path, arrays, meta)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    sched = d.get("schedule")
    d["schedule"] = CurriculumSchedule(**sched) if sched else None
    d["layer_set"] = tuple(d["layer_set"]) if d.get("layer_set") else None
    return TrainConfig(**d)


def load_checkpoint(path, G: RadianceGenerator) -> DistillState:
    """Rebuild a training state; rejects generator or version mismatches."""
    arrays, meta = arrayio.load_arrays(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    if meta["generator_hash"] != G.parameter_hash():
        raise CheckpointError("checkpoint was trained against a different generator")
    config = config_from_dict(meta["config"])
    template = TemplateField(
        Modulations(
            torch.as_tensor(arrays["template.gamma"], dtype=torch.float32),
            torch.as_tensor(arrays["template.beta"], dtype=torch.float32),
        )
    )
    state = init_state(config, G, template)
    for prefix, module in (("B", state.backward), ("F", state.forward)):
        for name, p in module.named_parameters():
            with torch.no_grad():
                p.copy_(torch.as_tensor(arrays[f"{prefix}.{name}"]))
    params = list(state.backward.parameters()) + list(state.forward.parameters())
    for i, p in enumerate(params):
        key = f"opt.{i}.exp_avg"
        if key in arrays:
            state.optimizer.state[p] = {
                "step": torch.tensor(meta["opt_steps"][str(i)]),
                "exp_avg": torch.as_tensor(arrays[key], dtype=torch.float32),
                "exp_avg_sq": torch.as_tensor(arrays[f"opt.{i}.exp_avg_sq"], dtype=torch.float32),
            }
    state.step = int(meta["iteration"])
    return state


def mean_residual_norm(
    field_net: DeformationField,
    G: RadianceGenerator,
    template: TemplateField,
    latent_sampler,
    config: TrainConfig,
    seed: int,
    n_instances: int = 4,
) -> float:
    """Mean ||H|| over freshly sampled training-distribution point sets."""
    rng = substream(seed, "residual-eval")
    vals = []
    with torch.no_grad():
        z = latent_sampler(rng, n_instances)
        for i in range(n_instances):
            pose = _sample_pose(config, rng)
            try:
                ps = sample_point_set(
                    G, template.mods, z[i], pose, config, rng, max_rays=256
                )
            except EmptyForegroundError:
                continue
            h = field_net.residual(ps.points, ps.z)
            vals.append(torch.linalg.norm(h, dim=-1).mean().item())
    if not vals:
        raise TrainingStepError("no foreground available for residual evaluation")
    return float(np.mean(vals))


def eval_sim_loss(
    G: RadianceGenerator,
    backward: DeformationField,
    forward: DeformationField,
    template: TemplateField,
    latent_sampler,
    config: TrainConfig,
    seed: int,
    n_instances: int = 8,
) -> float:
    """Feature-similarity loss on a fixed-seed evaluation batch at full
    complexity (no curriculum blending); the ablation comparison metric."""
    rng = substream(seed, "eval-sim")
    z = latent_sampler(rng, n_instances)
    with torch.no_grad():
        mods = G.map_latent(z)
    sources, targets = [], []
    for i in range(n_instances):
        mi = Modulations(mods.gamma[i], mods.beta[i])
        pose = _sample_pose(config, rng)
        try:
            sources.append(sample_point_set(G, mi, z[i], pose, config, rng, max_rays=128))
            ps = sample_point_set(G, template.mods, z[i], _sample_pose(config, rng), config, rng, max_rays=128)
            targets.append(replace(ps, mods=mi))
        except EmptyForegroundError:
            continue
    layer_set = config.layer_set or G.cfg.feature_layers
    with torch.no_grad():
        lb = loss_sim_backward(G, backward, sources, template.mods, layer_set)
        lf = loss_sim_forward(G, forward, targets, template.mods, layer_set)
    return float(lb + lf)
