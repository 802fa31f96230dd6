"""Command-line surface.

Every command resolves one configuration (defaults <- profile <- file <-
env <- --set overrides), echoes it into its run directory, and writes
machine-readable artifacts there. Exit codes: 0 ok, 2 config error,
3 runtime error, 4 failed acceptance check (eval --assert).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import arrayio, pipeline
from .config import RunConfig, echo_config, parse_config
from .errors import ConfigError
from .fields import Modulations
from .inversion import (
    InversionConfig,
    invert_deformation_conditions,
    invert_latent,
    sample_anchors,
)
from .rendering import look_at, render_image, project_feature_map
from .seeding import substream
from .training import load_checkpoint
from . import evaluation as ev

COMMANDS = (
    "fit-gen",
    "distill",
    "render",
    "transfer",
    "segprop",
    "keypoints",
    "uncertainty",
    "invert",
    "eval",
    "ablate",
    "report",
)

LABEL_COLORS = np.array(
    [
        [230, 60, 60],
        [60, 160, 230],
        [80, 200, 100],
        [240, 200, 60],
        [180, 90, 220],
        [60, 220, 210],
        [240, 130, 50],
        [150, 150, 150],
    ],
    dtype=np.uint8,
)


class AcceptanceFailure(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nerfcorr", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--profile", help="named profile (paper-celeba, paper-carla, paper-cats, toy-desk)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--out", help="run directory (immutable; use --force to reuse)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue from the run directory checkpoint")
    p.add_argument("--generator", help="generator bundle path")
    p.add_argument("--checkpoint", help="distillation checkpoint path")
    p.add_argument("--index", type=int, default=0, help="training-instance index")
    p.add_argument("--src", type=int, default=0)
    p.add_argument("--tgt", type=int, default=1)
    p.add_argument("--direction", choices=("backward", "forward"), default="backward")
    p.add_argument("--layer", type=int, default=None, help="feature layer for projection artifacts")
    p.add_argument("--image", help="input image (invert)")
    p.add_argument("--pose", help="pose JSON (invert)")
    p.add_argument("--sweep", choices=("curriculum",), default=None)
    p.add_argument("--steps", default="16,128,1024", help="curriculum sweep settings")
    p.add_argument("--drop", default=None, help="comma list of regularizers to drop (cycle,smooth,cycle2)")
    p.add_argument("--assert", dest="assert_", action="store_true", help="eval: fail on unmet thresholds")
    p.add_argument("--run", help="run directory to summarize (report)")
    p.add_argument("--workers", type=int, default=None, help="worker threads; 1 = bit-exact")
    return p


def _overrides(pairs):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _prepare_out(args, cfg) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not (args.force or args.resume):
        raise ConfigError(f"run directory {out} is not empty (pass --force for a fresh run)")
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config.txt")
    return out


def _load_bundle(args):
    if not args.generator:
        raise ConfigError("this command needs --generator")
    return pipeline.load_generator_bundle(args.generator)


def _load_fields(args, G):
    if not args.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    state = load_checkpoint(args.checkpoint, G)
    return state.backward, state.forward, state.template


def _instance_latent(cfg, category, latents, instances, index, stream):
    if 0 <= index < len(instances):
        return instances[index], latents[index]
    inst = category.sample(substream(cfg.seed, stream, index))
    z = torch.as_tensor(category.standardize(inst), dtype=torch.float32)
    return inst, z


def _pose_for(cfg, name="render-pose"):
    rng = substream(cfg.seed, name)
    az = rng.uniform(0, 2 * np.pi)
    pos = cfg.cam_radius * np.array([np.cos(az), np.sin(az), 0.15])
    return look_at(pos, fov_deg=cfg.fov_deg, height=cfg.image_res, width=cfg.image_res)


def _write_summary(out, payload):
    if out is not None:
        Path(out, "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _colorize(seg):
    img = np.zeros(seg.ids.shape + (3,), dtype=np.uint8)
    for k in range(seg.num_classes):
        img[seg.ids == k] = LABEL_COLORS[k % len(LABEL_COLORS)]
    return img


def cmd_fit_gen(args, cfg, out):
    G, latents, instances, category = pipeline.fit_toy_generator(cfg)
    path = (out or Path(".")) / "generator.nac"
    pipeline.save_generator_bundle(path, G, latents, instances, category)
    _write_summary(out, {"command": "fit-gen", "instances": len(instances), "generator_hash": G.parameter_hash(), "path": str(path)})
    return 0


def cmd_distill(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    template = pipeline.build_template(G, category, cfg)
    state = None
    if args.resume and out is not None and (out / "checkpoint.nac").exists():
        state = load_checkpoint(out / "checkpoint.nac", G)
    B, F, log = pipeline.distill(cfg, G, template, category, out_dir=out, state=state)
    final = log[-1] if log else None
    _write_summary(
        out,
        {
            "command": "distill",
            "iterations": cfg.total_iters,
            "final_total": final.total if final else None,
            "generator_hash": G.parameter_hash(),
        },
    )
    return 0


def cmd_render(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    inst, z = _instance_latent(cfg, category, latents, instances, args.index, "render-inst")
    pose = _pose_for(cfg)
    with torch.no_grad():
        mods = G.map_latent(z)
        res = render_image(G, mods, pose, pipeline.build_sampling(cfg), substream(cfg.seed, "render"))
    if out is not None:
        arrayio.write_image(out / "render.png", res.rgb.numpy())
        arrayio.write_depth(out / "depth.f32", res.depth.numpy())
        (out / "pose.json").write_text(
            json.dumps(
                {
                    "position": list(map(float, pose.position)),
                    "fov_deg": pose.fov_deg,
                    "height": pose.height,
                    "width": pose.width,
                }
            )
        )
        if args.layer is not None:
            fmap = project_feature_map(
                G, mods, pose, args.layer, pipeline.build_sampling(cfg), substream(cfg.seed, "render")
            )
            norm = torch.linalg.norm(fmap, dim=-1).numpy()
            arrayio.write_image(out / f"features_l{args.layer}.png", norm / max(norm.max(), 1e-8))
    _write_summary(out, {"command": "render", "index": args.index, "opacity_mean": float(res.opacity.mean())})
    return 0


def cmd_transfer(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    B, F, template = _load_fields(args, G)
    _, z_s = _instance_latent(cfg, category, latents, instances, args.src, "transfer-src")
    _, z_t = _instance_latent(cfg, category, latents, instances, args.tgt, "transfer-tgt")
    pose = _pose_for(cfg)
    sampling = pipeline.build_sampling(cfg)
    img = ev.transfer_texture(G, B, F, z_s, z_t, pose, sampling, substream(cfg.seed, "transfer"))
    if out is not None:
        arrayio.write_image(out / "transfer.png", img.numpy())
        with torch.no_grad():
            plain = render_image(G, G.map_latent(z_t), pose, sampling, substream(cfg.seed, "transfer"))
        arrayio.write_image(out / "target_plain.png", plain.rgb.numpy())
    _write_summary(out, {"command": "transfer", "src": args.src, "tgt": args.tgt})
    return 0


def cmd_segprop(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    B, F, template = _load_fields(args, G)
    inst, z = _instance_latent(cfg, category, latents, instances, args.index, "segprop-inst")
    pose = _pose_for(cfg)
    label_fn = ev.template_label_fn(G, template)
    pred = ev.propagate_segmentation(G, B, label_fn, z, pose, substream(cfg.seed, "segprop"), n_samples=cfg.seg_samples)
    gt = ev.gt_segmentation(inst, pose, pipeline.build_sampling(cfg), substream(cfg.seed, "seg-gt"))
    miou, per_class = ev.metric_miou(pred, gt)
    if out is not None:
        arrayio.write_image(out / "segmentation.png", _colorize(pred))
        arrayio.write_image(out / "segmentation_gt.png", _colorize(gt))
    _write_summary(out, {"command": "segprop", "miou": miou, "per_class": per_class})
    return 0


def cmd_keypoints(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    B, F, template = _load_fields(args, G)
    inst, z = _instance_latent(cfg, category, latents, instances, args.index, "kp-inst")
    pose = _pose_for(cfg)
    sampling = pipeline.build_sampling(cfg)
    kp_template = ev.template_keypoints(G, template)
    pred = ev.transfer_keypoints(G, F, kp_template, z, pose, sampling, substream(cfg.seed, "kp"))
    gt = ev.project_gt_keypoints(inst, pose)
    pck, aepe = ev.metric_pck_aepe(pred, gt, (pose.height, pose.width))
    payload = {
        "command": "keypoints",
        "pck": pck,
        "aepe": aepe,
        "keypoints": pred.xy.tolist(),
        "visible": pred.visible.tolist(),
    }
    if out is not None:
        (out / "keypoints.json").write_text(json.dumps(payload, indent=2))
    _write_summary(out, {"command": "keypoints", "pck": pck, "aepe": aepe})
    return 0


def cmd_uncertainty(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    B, F, template = _load_fields(args, G)
    inst, z = _instance_latent(cfg, category, latents, instances, args.index, "unc-inst")
    pose = _pose_for(cfg)
    field = B if args.direction == "backward" else F
    heat = ev.uncertainty_map(
        G, field, args.direction, z, template, pose, pipeline.build_sampling(cfg), substream(cfg.seed, "unc")
    )
    if out is not None:
        arrayio.write_image(out / f"uncertainty_{args.direction}.png", heat / max(float(heat.max()), 1e-8))
    _write_summary(out, {"command": "uncertainty", "mean_heat": float(heat.mean()), "max_heat": float(heat.max())})
    return 0


def cmd_invert(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    template = pipeline.build_template(G, category, cfg)
    sampling = pipeline.build_sampling(cfg)
    icfg = InversionConfig(
        iters=cfg.inv_iters,
        lr=cfg.inv_lr,
        stop_tol=cfg.inv_stop_tol,
        lambda_feat=cfg.inv_lambda_feat,
        lambda_reg=cfg.inv_lambda_reg,
        n_anchors=cfg.inv_anchors,
        seed=cfg.seed,
    )
    target_features = None
    if args.image:
        from PIL import Image

        img = torch.as_tensor(np.asarray(Image.open(args.image), dtype=np.float32) / 255.0)
        pose_spec = json.loads(Path(args.pose).read_text())
        pose = look_at(
            pose_spec["position"],
            fov_deg=pose_spec["fov_deg"],
            height=pose_spec["height"],
            width=pose_spec["width"],
        )
    else:
        # synthetic protocol: render a held-out instance as the target
        inst, z = _instance_latent(cfg, category, latents, instances, len(instances) + args.index, "invert-target")
        pose = _pose_for(cfg)
        with torch.no_grad():
            mods_gt = G.map_latent(z)
            img = render_image(G, mods_gt, pose, sampling, substream(cfg.seed, "invert-target")).rgb
            target_features = project_feature_map(
                G, mods_gt, pose, icfg.feature_layer, sampling, substream(cfg.seed, "invert-feat")
            )
    result = invert_latent(G, img, pose, icfg, sampling, template, target_features=target_features)
    payload = {
        "command": "invert",
        "recon_error": result.recon_error,
        "iterations": result.iterations,
    }
    if args.checkpoint:
        B, F, _ = _load_fields(args, G)
        anchors = sample_anchors(G, category.latent_sampler, pose, sampling, icfg)
        cond = invert_deformation_conditions(
            G, B, F, img, pose, result.mods, icfg, sampling, anchors=anchors
        )
        payload["condition_recon_error"] = cond.recon_error
        payload["condition_code"] = cond.code.tolist()
    if out is not None:
        arrayio.save_arrays(
            out / "inversion.nac",
            {"gamma": result.mods.gamma.numpy(), "beta": result.mods.beta.numpy()},
            {"recon_error": result.recon_error, "iterations": result.iterations},
        )
        with torch.no_grad():
            recon = render_image(G, result.mods, pose, sampling, substream(cfg.seed, "invert-recon"))
        arrayio.write_image(out / "inversion_recon.png", recon.rgb.numpy())
        arrayio.write_image(out / "inversion_target.png", img.numpy())
    _write_summary(out, payload)
    return 0


def cmd_eval(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    B, F, template = _load_fields(args, G)
    metrics = pipeline.evaluate_run(G, B, F, template, category, cfg)
    checks = pipeline.check_metrics(metrics)
    payload = {"command": "eval", "metrics": metrics, "checks": checks}
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_summary(out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.assert_ and not all(checks.values()):
        raise AcceptanceFailure(f"failed checks: {[k for k, v in checks.items() if not v]}")
    return 0


def cmd_ablate(args, cfg, out):
    G, latents, instances, category = _load_bundle(args)
    template = pipeline.build_template(G, category, cfg)
    payload = {"command": "ablate"}
    if args.sweep == "curriculum":
        steps = [int(s) for s in args.steps.split(",")]
        payload["curriculum"] = pipeline.ablate_curriculum(cfg, G, template, category, steps, out_dir=out)
    if args.drop:
        drops = ("none",) + tuple(args.drop.split(","))
        payload["drop"] = pipeline.ablate_drop(cfg, G, template, category, drops, out_dir=out)
    if args.sweep is None and not args.drop:
        raise ConfigError("ablate needs --sweep curriculum and/or --drop ...")
    _write_summary(out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_report(args, cfg, out):
    run = Path(args.run or (out or "."))
    bundle = {"run": str(run)}
    for name in ("config.txt",):
        p = run / name
        if p.exists():
            bundle["config"] = p.read_text()
    for name in ("summary.json", "metrics.json", "ablate_curriculum.json", "ablate_drop.json"):
        p = run / name
        if p.exists():
            bundle[name.replace(".json", "")] = json.loads(p.read_text())
    losses = run / "losses.csv"
    if losses.exists():
        lines = losses.read_text().strip().splitlines()
        bundle["losses_tail"] = lines[-5:]
    text = json.dumps(bundle, indent=2, sort_keys=True)
    if out is not None:
        (out / "report.json").write_text(text)
    print(text)
    return 0


HANDLERS = {
    "fit-gen": cmd_fit_gen,
    "distill": cmd_distill,
    "render": cmd_render,
    "transfer": cmd_transfer,
    "segprop": cmd_segprop,
    "keypoints": cmd_keypoints,
    "uncertainty": cmd_uncertainty,
    "invert": cmd_invert,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def dispatch(argv) -> int:
    args = build_parser().parse_args(argv)
    overrides = _overrides(args.set)
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = parse_config(args.config, overrides, profile=args.profile)
    torch.set_num_threads(max(1, cfg.workers))
    out = _prepare_out(args, cfg)
    return HANDLERS[args.command](args, cfg, out)


def main(argv=None) -> int:
    try:
        return dispatch(sys.argv[1:] if argv is None else argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except AcceptanceFailure as e:
        print(f"acceptance failure: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
