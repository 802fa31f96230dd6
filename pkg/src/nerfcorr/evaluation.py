"""Proxy tasks and exact metrics for learned correspondences.

Texture transfer, segmentation label propagation, and keypoint transfer
mirror the downstream protocols the fields are meant to serve; the toy
world's chart additionally gives an exact correspondence error that real
categories lack. All rendering here runs at full instance complexity (no
curriculum blending) with the generator frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .curriculum import TemplateField
from .errors import DomainError
from .fields import DeformationField, Modulations, RadianceGenerator, correspond
from .losses import descriptor
from .rendering import (
    SamplingConfig,
    CameraPose,
    generate_rays,
    importance_depths,
    project_points,
    stratified_depths,
    transmittance,
)
from .toyworld import (
    NUM_CLASSES,
    NUM_KEYPOINTS,
    SENTINEL,
    SIGMA_MAX,
    ToyInstance,
    fibonacci_directions,
    gt_annotations,
    gt_correspond,
    sector_label,
)

MIN_OPACITY = 0.5


@dataclass
class SegMap:
    """Class-id image with a background sentinel."""

    ids: np.ndarray
    num_classes: int = NUM_CLASSES
    sentinel: int = SENTINEL


@dataclass
class KeypointSet:
    """Projected keypoints: pixel positions (N, 2), visibility flags, and
    optionally the 3D points they came from."""

    xy: np.ndarray
    visible: np.ndarray
    xyz: np.ndarray | None = None

    def __post_init__(self):
        if self.xy.shape[0] != NUM_KEYPOINTS:
            raise DomainError(f"expected {NUM_KEYPOINTS} keypoints, got {self.xy.shape[0]}")


def _hierarchical(G, mods, rays, cfg: SamplingConfig, rng, need_color=True):
    """Shared two-pass sampling; returns (t union, x union, sigma, color)."""
    n = len(rays)
    t_c = stratified_depths(rays.near, rays.far, cfg.ray_steps, n, rng)
    with torch.no_grad():
        x_c = rays.origins[:, None, :] + t_c[..., None] * rays.directions[:, None, :]
        sig_c = G.query(x_c, mods, need_features=False, need_color=False).sigma
        delta_c = torch.cat([t_c.diff(dim=-1), rays.far - t_c[:, -1:]], dim=-1)
        _, w_c = transmittance(sig_c, delta_c)
    t_f = importance_depths(rays.near, rays.far, w_c, cfg.ray_steps, rng)
    t_u, _ = torch.sort(torch.cat([t_c, t_f], dim=-1), dim=-1)
    x_u = rays.origins[:, None, :] + t_u[..., None] * rays.directions[:, None, :]
    out = G.query(x_u, mods, need_features=False, need_color=need_color)
    return t_u, x_u, out.sigma, out.color


def transfer_texture(
    G: RadianceGenerator,
    B: DeformationField,
    Ffield: DeformationField,
    z_src: torch.Tensor,
    z_tgt: torch.Tensor,
    pose: CameraPose,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Render the target's geometry wearing the source's texture.

    Rays are cast in the target field; density comes from the target, color
    is pulled from the source at each sample's correspondent
    F(B(x, z_tgt), z_src). Returns an (H, W, 3) image.
    """
    with torch.no_grad():
        mods_s = G.map_latent(z_src)
        mods_t = G.map_latent(z_tgt)
        rays = generate_rays(pose, cfg.near, cfg.far, cfg.bounding_radius)
        t_u, x_u, sigma, _ = _hierarchical(G, mods_t, rays, cfg, rng, need_color=False)
        x_corr = correspond(B, Ffield, x_u, z_tgt, z_src)
        color = G.query(x_corr, mods_s, need_features=False).color
        delta = torch.cat([t_u.diff(dim=-1), rays.far - t_u[:, -1:]], dim=-1)
        _, w = transmittance(sigma, delta)
        rgb = (w[..., None] * color).sum(dim=-2)
    return rgb.reshape(pose.height, pose.width, 3)


def template_label_fn(G: RadianceGenerator, template: TemplateField, tau: float = 0.05 * SIGMA_MAX):
    """Label function of the template field: angular-sector class inside the
    template's own density support, sentinel elsewhere."""

    def fn(x: np.ndarray) -> np.ndarray:
        xt = torch.as_tensor(np.asarray(x, dtype=np.float32)).reshape(-1, 3)
        with torch.no_grad():
            sig = G.query(xt, template.mods, need_features=False, need_color=False).sigma
        lab = sector_label(x).reshape(-1)
        lab = np.where(sig.numpy() >= tau, lab, SENTINEL)
        return lab.reshape(np.asarray(x).shape[:-1])

    return fn


def propagate_segmentation(
    G: RadianceGenerator,
    B: DeformationField,
    label_fn,
    z: torch.Tensor,
    pose: CameraPose,
    rng: np.random.Generator,
    n_samples: int = 96,
    num_classes: int = NUM_CLASSES,
) -> SegMap:
    """Per-pixel transmittance-weighted voting over backward-deformed samples.

    Each of the n_samples ray points is deformed by B to the template and
    queries the template's label function; votes are accumulated with the
    compositing weights and pixels whose weight sum stays below 0.5 get the
    background sentinel.
    """
    with torch.no_grad():
        mods = G.map_latent(z)
        rays = generate_rays(pose)
        n = len(rays)
        t = stratified_depths(rays.near, rays.far, n_samples, n, rng)
        x = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        sigma = G.query(x, mods, need_features=False, need_color=False).sigma
        delta = torch.cat([t.diff(dim=-1), rays.far - t[:, -1:]], dim=-1)
        _, w = transmittance(sigma, delta)
        x0 = B(x.reshape(-1, 3), z).reshape(n, n_samples, 3)
    labels = label_fn(x0.numpy())
    votes = np.zeros((n, num_classes + 1))
    wn = w.numpy()
    lab_idx = np.where(labels == SENTINEL, num_classes, labels)
    np.add.at(votes, (np.repeat(np.arange(n), n_samples), lab_idx.reshape(-1)), wn.reshape(-1))
    ids = votes.argmax(axis=1)
    ids = np.where(ids == num_classes, SENTINEL, ids)
    ids = np.where(wn.sum(axis=1) < MIN_OPACITY, SENTINEL, ids)
    return SegMap(ids.reshape(pose.height, pose.width).astype(np.int64), num_classes)


def rendered_label_map(
    field_query,
    label_fn,
    pose: CameraPose,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> SegMap:
    """Reference labeling independent of any deformation: evaluate the label
    function at each ray's expected termination point."""
    with torch.no_grad():
        rays = generate_rays(pose, cfg.near, cfg.far, cfg.bounding_radius)
        t = stratified_depths(rays.near, rays.far, 4 * cfg.ray_steps, len(rays), rng)
        x = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        sigma = field_query(x)
        delta = torch.cat([t.diff(dim=-1), rays.far - t[:, -1:]], dim=-1)
        _, w = transmittance(sigma, delta)
        opac = w.sum(dim=-1)
        depth = (w * t).sum(dim=-1) / opac.clamp_min(1e-8)
        pts = rays.origins + depth[:, None] * rays.directions
    ids = label_fn(pts.numpy())
    ids = np.where(opac.numpy() >= MIN_OPACITY, ids, SENTINEL)
    return SegMap(ids.reshape(pose.height, pose.width).astype(np.int64))


def gt_segmentation(inst: ToyInstance, pose: CameraPose, cfg: SamplingConfig, rng) -> SegMap:
    """Ground-truth label map of a toy instance (analytic fields)."""
    from .toyworld import AnalyticField

    field = AnalyticField(inst)
    ann = gt_annotations(inst)

    def sigma_query(x):
        return field.query(x, need_color=False).sigma

    return rendered_label_map(sigma_query, ann.label_of, pose, cfg, rng)


def metric_miou(pred: SegMap, gt: SegMap):
    """Per-class and mean IOU; classes absent from both maps are skipped."""
    if pred.ids.shape != gt.ids.shape or pred.num_classes != gt.num_classes:
        raise DomainError("segmentation maps do not match in shape or class count")
    per_class = {}
    for k in range(gt.num_classes):
        p = pred.ids == k
        g = gt.ids == k
        union = (p | g).sum()
        if union == 0:
            continue
        per_class[k] = float((p & g).sum() / union)
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return miou, per_class


def surface_radius_of_field(sigma_fn, directions: np.ndarray, r_grid=None) -> np.ndarray:
    """Peak-density radius along rays from the origin (per direction)."""
    if r_grid is None:
        r_grid = np.linspace(0.15, 0.95, 161)
    pts = directions[:, None, :] * r_grid[None, :, None]
    sig = sigma_fn(torch.as_tensor(pts, dtype=torch.float32)).numpy()
    return r_grid[sig.argmax(axis=1)]


def template_keypoints(G: RadianceGenerator, template: TemplateField) -> np.ndarray:
    """The 98 chart keypoints realized on the template's density shell."""
    dirs = fibonacci_directions(NUM_KEYPOINTS)

    def sigma_fn(x):
        with torch.no_grad():
            return G.query(x, template.mods, need_features=False, need_color=False).sigma

    r = surface_radius_of_field(sigma_fn, dirs)
    return dirs * r[:, None]


def transfer_keypoints(
    G: RadianceGenerator,
    Ffield: DeformationField,
    template_kp3d: np.ndarray,
    z_t: torch.Tensor,
    pose: CameraPose,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> KeypointSet:
    """Forward-deform the template keypoints into the target and project.

    Visibility is a depth test against the target's rendered depth map: a
    point more than two bin widths behind the expected surface is occluded.
    """
    with torch.no_grad():
        kp = torch.as_tensor(template_kp3d, dtype=torch.float32)
        x_t = Ffield(kp, z_t)
        xy, depth = project_points(pose, x_t)
        mods = G.map_latent(z_t)
        rays = generate_rays(pose, cfg.near, cfg.far, cfg.bounding_radius)
        t_u, _, sigma, _ = _hierarchical(G, mods, rays, cfg, rng, need_color=False)
        delta = torch.cat([t_u.diff(dim=-1), rays.far - t_u[:, -1:]], dim=-1)
        _, w = transmittance(sigma, delta)
        dmap = ((w * t_u).sum(-1) / w.sum(-1).clamp_min(1e-8)).reshape(pose.height, pose.width)
    bin_w = (rays.far - rays.near) / cfg.ray_steps
    xy_np = xy.numpy()
    px = np.clip(np.round(xy_np[:, 0]).astype(int), 0, pose.width - 1)
    py = np.clip(np.round(xy_np[:, 1]).astype(int), 0, pose.height - 1)
    inside = (
        (xy_np[:, 0] >= 0)
        & (xy_np[:, 0] <= pose.width - 1)
        & (xy_np[:, 1] >= 0)
        & (xy_np[:, 1] <= pose.height - 1)
    )
    visible = inside & (depth.numpy() <= dmap.numpy()[py, px] + 2.0 * bin_w)
    return KeypointSet(xy_np, visible, x_t.numpy())


def project_gt_keypoints(inst: ToyInstance, pose: CameraPose) -> KeypointSet:
    """Exact chart keypoints of a toy instance projected to pixels; all
    front-facing points marked visible via the analytic surface."""
    ann = gt_annotations(inst)
    kp = torch.as_tensor(ann.keypoints_3d, dtype=torch.float32)
    xy, depth = project_points(pose, kp)
    cam = np.asarray(pose.position)
    # a surface point is visible if the segment to the camera exits the shell
    # band without re-entering: test by marching a few probe points
    ts = np.linspace(0.15, 0.95, 17)
    seg = kp.numpy()[:, None, :] * (1 - ts[None, :, None]) + cam[None, None, :] * ts[None, :, None]
    from .toyworld import analytic_radiance

    sig, _ = analytic_radiance(inst, seg)
    blocked = (sig > 0.5 * SIGMA_MAX).any(axis=1)
    xy_np = xy.numpy()
    inside = (
        (xy_np[:, 0] >= 0)
        & (xy_np[:, 0] <= pose.width - 1)
        & (xy_np[:, 1] >= 0)
        & (xy_np[:, 1] <= pose.height - 1)
    )
    return KeypointSet(xy_np, inside & ~blocked, ann.keypoints_3d)


def metric_pck_aepe(pred: KeypointSet, gt: KeypointSet, image_size, thresholds=(0.05, 0.01)):
    """PCK at the given fractions of max(H, W) plus average end-point error,
    both over keypoints visible in the ground truth."""
    if pred.xy.shape != gt.xy.shape:
        raise DomainError("keypoint sets differ in length")
    h, w = image_size
    vis = gt.visible
    if vis.sum() == 0:
        raise DomainError("no visible keypoints to score")
    err = np.linalg.norm(pred.xy[vis] - gt.xy[vis], axis=-1)
    pck = {float(d): float((err <= d * max(h, w)).mean()) for d in thresholds}
    return pck, float(err.mean())


def uncertainty_map(
    G: RadianceGenerator,
    field_net: DeformationField,
    direction: str,
    z: torch.Tensor,
    template: TemplateField,
    pose: CameraPose,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    layer_set=None,
    chunk: int = 1024,
) -> np.ndarray:
    """Composite the per-point similarity summand (unweighted) along rays.

    direction="backward" renders the instance and scores descriptor gaps to
    its backward-deformed template correspondents; "forward" renders the
    template and scores forward-deformed correspondents in the instance.
    """
    if direction not in ("backward", "forward"):
        raise DomainError("direction must be 'backward' or 'forward'")
    layer_set = layer_set or G.cfg.feature_layers
    with torch.no_grad():
        mods_z = G.map_latent(z)
        view_mods = mods_z if direction == "backward" else template.mods
        rays = generate_rays(pose, cfg.near, cfg.far, cfg.bounding_radius)
        heats = []
        for lo in range(0, len(rays), chunk):
            sub = rays.select(slice(lo, lo + chunk))
            t_u, x_u, sigma, _ = _hierarchical(G, view_mods, sub, cfg, rng, need_color=False)
            shape = x_u.shape[:2]
            flat = x_u.reshape(-1, 3)
            if direction == "backward":
                d_here = descriptor(G, flat, mods_z, layer_set)
                d_there = descriptor(G, field_net(flat, z), template.mods, layer_set)
            else:
                d_here = descriptor(G, flat, template.mods, layer_set)
                d_there = descriptor(G, field_net(flat, z), mods_z, layer_set)
            gap = 0.5 * ((d_here - d_there) ** 2).sum(dim=-1)
            delta = torch.cat([t_u.diff(dim=-1), sub.far - t_u[:, -1:]], dim=-1)
            _, w = transmittance(sigma, delta)
            heats.append((w * gap.reshape(shape)).sum(dim=-1))
        heat = torch.cat(heats)
    return heat.reshape(pose.height, pose.width).numpy()


def correspondence_error(
    B: DeformationField,
    Ffield: DeformationField,
    pairs,
    n_points: int,
    rng: np.random.Generator,
):
    """Exact correspondence error against the toy chart.

    pairs is a list of (inst_a, z_a, inst_b, z_b). Surface points of each
    source instance are pushed through F(B(.)) and compared with the chart
    correspondent; the identity baseline replaces the fields with the
    identity map. Returns pooled statistics.
    """
    errs, base = [], []
    for inst_a, z_a, inst_b, z_b in pairs:
        u = rng.standard_normal((n_points, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        from .toyworld import surface_radius

        x_a = surface_radius(inst_a, u)[:, None] * u
        gt = gt_correspond(inst_a, inst_b, x_a)
        with torch.no_grad():
            pred = correspond(
                B, Ffield, torch.as_tensor(x_a, dtype=torch.float32), z_a, z_b
            ).numpy()
        errs.append(np.linalg.norm(pred - gt, axis=-1))
        base.append(np.linalg.norm(x_a - gt, axis=-1))
    errs = np.concatenate(errs)
    base = np.concatenate(base)
    return {
        "mean": float(errs.mean()),
        "median": float(np.median(errs)),
        "baseline_mean": float(base.mean()),
        "baseline_median": float(np.median(base)),
    }
