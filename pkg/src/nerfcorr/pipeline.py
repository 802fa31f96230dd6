"""High-level run orchestration shared by the CLI and the test harness.

Builds typed configs from a RunConfig, owns the generator bundle format,
and implements the evaluation and ablation protocols end to end.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import arrayio
from .config import RunConfig, layer_set
from .curriculum import CurriculumSchedule, TemplateField, estimate_template
from .errors import CheckpointError
from .fields import (
    DeformationConfig,
    DeformationField,
    GeneratorConfig,
    Modulations,
    RadianceGenerator,
)
from .losses import LossWeights
from .rendering import SamplingConfig, look_at
from .seeding import substream
from .toyworld import (
    FitConfig,
    ToyCategory,
    ToyInstance,
    fit_generator,
    gt_annotations,
    sample_instance,
)
from .training import TrainConfig, eval_sim_loss, run_distillation
from . import evaluation as ev


def build_generator_config(cfg: RunConfig) -> GeneratorConfig:
    return GeneratorConfig(
        d_z=cfg.d_z,
        depth=cfg.gen_depth,
        width=cfg.gen_width,
        feature_layers=tuple(i for i in layer_set(cfg) if i < cfg.gen_depth),
        first_layer_scale=cfg.gen_first_layer_scale,
    )


def build_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr,
        decay_every=cfg.decay_every,
        decay_gamma=cfg.decay_gamma,
        total_iters=cfg.total_iters,
        n_source=cfg.n_source,
        n_target=cfg.n_target,
        ray_steps=cfg.ray_steps,
        depth_mask=cfg.depth_mask,
        sampling_ratio=cfg.sampling_ratio,
        batch_size=cfg.batch_size,
        probe_res=cfg.probe_res,
        cam_radius=cfg.cam_radius,
        cam_elev_deg=cfg.cam_elev_deg,
        fov_deg=cfg.fov_deg,
        checkpoint_every=cfg.checkpoint_every,
        weights=LossWeights(
            lambda_cycle=cfg.lambda_cycle,
            lambda_cycle_2nd=cfg.lambda_cycle2,
            lambda_smooth=cfg.lambda_smooth,
            epsilon_smooth=cfg.epsilon_smooth,
        ),
        schedule=CurriculumSchedule(
            total_steps=cfg.total_iters,
            alpha_max=cfg.alpha_max,
            increments=cfg.curriculum_steps or None,
        ),
        layer_set=tuple(i for i in layer_set(cfg) if i < cfg.gen_depth),
        deformation_hidden=cfg.deformation_hidden,
        seed=cfg.seed,
        condition_on_blended_latent=cfg.condition_on_blended_latent,
        jacobian_full_map=cfg.jacobian_full_map,
    )


def build_fit_config(cfg: RunConfig) -> FitConfig:
    return FitConfig(
        steps=cfg.fit_steps,
        batch=cfg.fit_batch,
        lr=cfg.fit_lr,
        seed=cfg.seed,
        generator=build_generator_config(cfg),
    )


def build_sampling(cfg: RunConfig) -> SamplingConfig:
    return SamplingConfig(ray_steps=cfg.ray_steps)


def fit_toy_generator(cfg: RunConfig):
    """Sample the named instance set and regression-fit the generator."""
    category = ToyCategory(d_z=cfg.d_z)
    rng = substream(cfg.seed, "instances")
    instances = [category.sample(rng) for _ in range(cfg.n_instances)]
    G, latents = fit_generator(instances, build_fit_config(cfg), category)
    return G, latents, instances, category


def save_generator_bundle(path, G, latents, instances, category) -> None:
    arrays = {f"G.{n}": p.detach().cpu().numpy() for n, p in G.named_parameters()}
    arrays["latents"] = latents.detach().cpu().numpy()
    meta = {
        "kind": "generator-bundle",
        "gen_config": {
            "d_z": G.cfg.d_z,
            "depth": G.cfg.depth,
            "width": G.cfg.width,
            "feature_layers": list(G.cfg.feature_layers),
            "view_dependent": G.cfg.view_dependent,
            "map_hidden": G.cfg.map_hidden,
            "map_depth": G.cfg.map_depth,
            "first_layer_scale": G.cfg.first_layer_scale,
        },
        "instances": [{"theta": list(i.theta), "phase": i.phase} for i in instances],
        "d_z": category.d_z,
    }
    arrayio.save_arrays(path, arrays, meta)


def load_generator_bundle(path):
    arrays, meta = arrayio.load_arrays(path)
    if meta.get("kind") != "generator-bundle":
        raise CheckpointError(f"{path} is not a generator bundle")
    gcfg = dict(meta["gen_config"])
    gcfg["feature_layers"] = tuple(gcfg["feature_layers"])
    G = RadianceGenerator(GeneratorConfig(**gcfg))
    for name, p in G.named_parameters():
        with torch.no_grad():
            p.copy_(torch.as_tensor(arrays[f"G.{name}"]))
    G.requires_grad_(False)
    G.eval()
    latents = torch.as_tensor(arrays["latents"], dtype=torch.float32)
    instances = [ToyInstance(tuple(e["theta"]), e["phase"]) for e in meta["instances"]]
    category = ToyCategory(d_z=meta["d_z"])
    return G, latents, instances, category


def build_template(G, category, cfg: RunConfig) -> TemplateField:
    return estimate_template(
        G, cfg.template_samples, substream(cfg.seed, "template"), category.latent_sampler
    )


def identity_field(G, hidden: int = 64) -> DeformationField:
    return DeformationField(DeformationConfig(d_z=G.cfg.d_z, hidden=hidden)).zero_residual_()


def _eval_pose(cfg: RunConfig, rng: np.random.Generator, res: int | None = None):
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = np.radians(rng.uniform(-cfg.cam_elev_deg, cfg.cam_elev_deg))
    pos = cfg.cam_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    r = res or cfg.image_res
    return look_at(pos, fov_deg=cfg.fov_deg, height=r, width=r)


def cycle_error(B, Ffield, category, rng, n_instances=8, n_points=256) -> float:
    """Mean ||F(B(x, z), z) - x|| over surface points of fresh instances."""
    from .toyworld import surface_radius

    vals = []
    for _ in range(n_instances):
        inst = category.sample(rng)
        z = torch.as_tensor(category.standardize(inst), dtype=torch.float32)
        u = rng.standard_normal((n_points, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        x = torch.as_tensor(surface_radius(inst, u)[:, None] * u, dtype=torch.float32)
        with torch.no_grad():
            back = Ffield(B(x, z), z)
        vals.append(torch.linalg.norm(back - x, dim=-1).mean().item())
    return float(np.mean(vals))


def jacobian_stat(field, category, rng, n_instances=6, n_points=128) -> float:
    """Mean squared Frobenius norm of the residual Jacobian on shell points."""
    from .fields import field_jacobian
    from .toyworld import surface_radius

    vals = []
    for _ in range(n_instances):
        inst = category.sample(rng)
        z = torch.as_tensor(category.standardize(inst), dtype=torch.float32)
        u = rng.standard_normal((n_points, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        x = torch.as_tensor(surface_radius(inst, u)[:, None] * u, dtype=torch.float32)
        J = field_jacobian(field, x, z)
        vals.append(float((J**2).sum(dim=(-2, -1)).mean()))
    return float(np.mean(vals))


def evaluate_run(G, B, Ffield, template, category, cfg: RunConfig, seed: int | None = None):
    """Full metric bundle for a trained pair of fields.

    Correspondence error vs the chart oracle (with identity baseline),
    cycle error, segmentation propagation mIOU vs identity deformation, and
    keypoint transfer PCK/AEPE vs identity. All sampling is seeded.
    """
    seed = cfg.seed if seed is None else seed
    rng = substream(seed, "evaluate")
    pairs = []
    for _ in range(cfg.eval_pairs):
        a = category.sample(rng)
        b = category.sample(rng)
        pairs.append(
            (
                a,
                torch.as_tensor(category.standardize(a), dtype=torch.float32),
                b,
                torch.as_tensor(category.standardize(b), dtype=torch.float32),
            )
        )
    corr = ev.correspondence_error(B, Ffield, pairs, cfg.eval_points, rng)
    cyc = cycle_error(B, Ffield, category, rng)
    ident = identity_field(G)
    label_fn = ev.template_label_fn(G, template)
    kp_template = ev.template_keypoints(G, template)
    sampling = build_sampling(cfg)
    mious, mious_id, aepes, aepes_id, pcks = [], [], [], [], []
    for k in range(cfg.eval_instances):
        inst = category.sample(rng)
        z = torch.as_tensor(category.standardize(inst), dtype=torch.float32)
        pose = _eval_pose(cfg, rng, res=min(cfg.image_res, 64))
        gt_map = ev.gt_segmentation(inst, pose, sampling, substream(seed, "seg-gt", k))
        pred = ev.propagate_segmentation(
            G, B, label_fn, z, pose, substream(seed, "seg", k), n_samples=cfg.seg_samples
        )
        pred_id = ev.propagate_segmentation(
            G, ident, label_fn, z, pose, substream(seed, "seg", k), n_samples=cfg.seg_samples
        )
        mious.append(ev.metric_miou(pred, gt_map)[0])
        mious_id.append(ev.metric_miou(pred_id, gt_map)[0])
        gt_kp = ev.project_gt_keypoints(inst, pose)
        kp = ev.transfer_keypoints(G, Ffield, kp_template, z, pose, sampling, substream(seed, "kp", k))
        kp_id = ev.transfer_keypoints(G, ident, kp_template, z, pose, sampling, substream(seed, "kp", k))
        pck, aepe = ev.metric_pck_aepe(kp, gt_kp, (pose.height, pose.width))
        _, aepe_id = ev.metric_pck_aepe(kp_id, gt_kp, (pose.height, pose.width))
        pcks.append(pck)
        aepes.append(aepe)
        aepes_id.append(aepe_id)
    return {
        "corr_err": corr,
        "cycle_error_mean": cyc,
        "miou": float(np.mean(mious)),
        "miou_identity": float(np.mean(mious_id)),
        "pck": {k: float(np.mean([p[k] for p in pcks])) for k in pcks[0]},
        "aepe": float(np.mean(aepes)),
        "aepe_identity": float(np.mean(aepes_id)),
    }


ASSERTIONS = (
    ("corr_median_vs_baseline", lambda m: m["corr_err"]["median"] <= 0.5 * m["corr_err"]["baseline_median"]),
    ("cycle_error", lambda m: m["cycle_error_mean"] < 5e-2),
    ("miou_gap", lambda m: m["miou"] - m["miou_identity"] >= 0.10),
    ("aepe_vs_identity", lambda m: m["aepe"] <= 0.7 * m["aepe_identity"]),
)


def check_metrics(metrics: dict):
    """Acceptance-style threshold checks; returns {name: bool}."""
    return {name: bool(fn(metrics)) for name, fn in ASSERTIONS}


def distill(cfg: RunConfig, G, template, category, out_dir=None, state=None, progress=None):
    tcfg = build_train_config(cfg)
    return run_distillation(
        tcfg, G, template, category.latent_sampler, out_dir=out_dir, state=state, progress=progress
    )


def ablate_curriculum(cfg: RunConfig, G, template, category, steps_list, out_dir=None):
    """Train short runs differing only in curriculum increments; report the
    fixed-seed evaluation similarity loss per setting."""
    rows = []
    for steps in steps_list:
        sub = RunConfig(cfg)
        sub["total_iters"] = cfg.ablate_iters
        sub["curriculum_steps"] = int(steps)
        sub["checkpoint_every"] = max(cfg.ablate_iters, 1)
        B, F, _ = distill(sub, G, template, category)
        sim = eval_sim_loss(
            G, B, F, template, category.latent_sampler, build_train_config(sub), cfg.seed
        )
        rows.append({"curriculum_steps": int(steps), "eval_sim": sim})
    if out_dir is not None:
        Path(out_dir, "ablate_curriculum.json").write_text(json.dumps(rows, indent=2))
    return rows


def ablate_drop(cfg: RunConfig, G, template, category, drops=("none", "cycle", "smooth"), out_dir=None):
    """Train matched short runs with one regularizer removed at a time.

    Reports the exact correspondence error and the field's Jacobian-norm
    statistic for each variant; 'none' is the full-loss baseline.
    """
    rows = []
    for drop in drops:
        sub = RunConfig(cfg)
        sub["total_iters"] = cfg.ablate_iters
        sub["curriculum_steps"] = 0
        sub["checkpoint_every"] = max(cfg.ablate_iters, 1)
        if drop == "cycle":
            sub["lambda_cycle"] = 0.0
        elif drop == "smooth":
            sub["lambda_smooth"] = 0.0
        elif drop == "cycle2":
            sub["lambda_cycle2"] = 0.0
        B, F, _ = distill(sub, G, template, category)
        rng = substream(cfg.seed, "ablate-eval")
        pairs = []
        for _ in range(max(6, cfg.eval_pairs // 2)):
            a = category.sample(rng)
            b = category.sample(rng)
            pairs.append(
                (
                    a,
                    torch.as_tensor(category.standardize(a), dtype=torch.float32),
                    b,
                    torch.as_tensor(category.standardize(b), dtype=torch.float32),
                )
            )
        corr = ev.correspondence_error(B, Ffield=F, pairs=pairs, n_points=cfg.eval_points, rng=rng)
        jstat = jacobian_stat(B, category, substream(cfg.seed, "ablate-jac"))
        rows.append({"drop": drop, "corr_median": corr["median"], "jacobian_sq_mean": jstat})
    if out_dir is not None:
        Path(out_dir, "ablate_drop.json").write_text(json.dumps(rows, indent=2))
    return rows
