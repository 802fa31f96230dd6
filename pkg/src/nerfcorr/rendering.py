"""Ray generation, hierarchical sampling, and volume compositing.

Pixels accumulate color as sum_i T_i (1 - exp(-sigma_i delta_i)) c_i with
T_i = exp(-sum_{j<i} sigma_j delta_j) and delta_i the spacing between
consecutive depths (the last delta runs to the far plane). Unallocated mass
composites to black. All per-ray computation is vectorized and pure; random
draws come from an explicit numpy generator in fixed row-major ray order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import DomainError, EmptyForegroundError
from .fields import Modulations, RadianceGenerator

EPS_NUM = 1e-8


@dataclass
class CameraPose:
    """Pinhole camera: position, orientation (columns = right, down,
    forward; right-handed, det +1), vertical == horizontal fov in degrees,
    image dims in pixels."""

    position: np.ndarray
    orientation: np.ndarray
    fov_deg: float
    height: int
    width: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        R = self.orientation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0.9:
            raise DomainError("orientation must be a rotation matrix (det +1)")
        if not (0.0 < self.fov_deg < 180.0):
            raise DomainError(f"degenerate fov {self.fov_deg}")

    @property
    def forward(self) -> np.ndarray:
        return self.orientation[:, 2]


def look_at(
    position,
    target=(0.0, 0.0, 0.0),
    up=(0.0, 0.0, 1.0),
    fov_deg: float = 50.0,
    height: int = 64,
    width: int = 64,
) -> CameraPose:
    """Camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-9:
        raise DomainError("camera position coincides with target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise DomainError("view direction parallel to up vector")
    right = right / rn
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return CameraPose(position, R, fov_deg, height, width)


@dataclass
class RayBundle:
    """One ray per pixel in row-major order: origins (R, 3), unit
    directions (R, 3), shared near/far in scene units."""

    origins: torch.Tensor
    directions: torch.Tensor
    near: float
    far: float

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise DomainError(f"require 0 < near < far, got ({self.near}, {self.far})")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def select(self, idx) -> "RayBundle":
        return replace(self, origins=self.origins[idx], directions=self.directions[idx])


def generate_rays(
    pose: CameraPose,
    near: float | None = None,
    far: float | None = None,
    bounding_radius: float = 1.0,
    dtype=torch.float32,
) -> RayBundle:
    """Pinhole rays through pixel centers, row-major.

    Default near/far bracket the origin-centered ball of ``bounding_radius``
    as seen from the camera.
    """
    h, w = pose.height, pose.width
    focal = 0.5 * w / math.tan(math.radians(pose.fov_deg) / 2.0)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = (jj.ravel() + 0.5 - 0.5 * w) / focal
    v = (ii.ravel() + 0.5 - 0.5 * h) / focal
    dirs_cam = np.stack([u, v, np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ pose.orientation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    cam_dist = float(np.linalg.norm(pose.position))
    if near is None:
        near = max(cam_dist - bounding_radius, 1e-3)
    if far is None:
        far = cam_dist + bounding_radius
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return RayBundle(
        torch.as_tensor(origins, dtype=dtype),
        torch.as_tensor(dirs, dtype=dtype),
        float(near),
        float(far),
    )


def project_points(pose: CameraPose, points: torch.Tensor):
    """World points (N, 3) -> pixel coords (N, 2) and ray depth (N,).

    Pixel coords follow the same pixel-center convention as generate_rays;
    depth is the distance along the (unit) ray through that point.
    """
    R = torch.as_tensor(pose.orientation, dtype=points.dtype)
    p = torch.as_tensor(pose.position, dtype=points.dtype)
    local = (points - p) @ R  # columns -> camera axes
    zc = local[..., 2]
    if (zc <= 0).any():
        raise DomainError("point behind camera")
    focal = 0.5 * pose.width / math.tan(math.radians(pose.fov_deg) / 2.0)
    px = local[..., 0] / zc * focal + 0.5 * pose.width - 0.5
    py = local[..., 1] / zc * focal + 0.5 * pose.height - 0.5
    depth = torch.linalg.norm(local, dim=-1)
    return torch.stack([px, py], dim=-1), depth


def stratified_depths(
    near: float, far: float, n: int, n_rays: int, rng: np.random.Generator, dtype=torch.float32
) -> torch.Tensor:
    """One uniform draw per equal bin of [near, far]; (n_rays, n), ascending."""
    if n < 1:
        raise DomainError("need at least one sample")
    edges = np.linspace(near, far, n + 1)
    u = rng.uniform(size=(n_rays, n))
    t = edges[:-1] + u * (edges[1:] - edges[:-1])
    return torch.as_tensor(t, dtype=dtype)


def importance_depths(
    near: float,
    far: float,
    coarse_w: torch.Tensor,
    n_fine: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Inverse-CDF draws from the piecewise-constant density proportional to
    coarse_w over the equal coarse bins of [near, far]; (R, n_fine) ascending.

    Rays whose weights are all ~zero fall back to stratified sampling.
    """
    w = coarse_w.detach().cpu().numpy().astype(np.float64)
    if (w < 0).any():
        raise DomainError("importance weights must be nonnegative")
    n_rays, n_bins = w.shape
    total = w.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] <= EPS_NUM
    w = np.where(degenerate[:, None], np.ones_like(w), w)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = rng.uniform(size=(n_rays, n_fine))
    # vectorized searchsorted: index of the bin whose cdf interval holds u
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=-1) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    lo = cdf[np.arange(n_rays)[:, None], idx]
    hi = cdf[np.arange(n_rays)[:, None], idx + 1]
    frac = (u - lo) / np.maximum(hi - lo, EPS_NUM)
    bin_w = (far - near) / n_bins
    t = near + (idx + frac) * bin_w
    t.sort(axis=1)
    return torch.as_tensor(t, dtype=coarse_w.dtype)


@dataclass
class RaySampleBatch:
    """Per-ray samples: depths t (R, N) ascending, positions x (R, N, 3),
    spacings delta (R, N), generator outputs sigma/color, and after
    compositing the transmittance T and weights w."""

    t: torch.Tensor
    x: torch.Tensor
    delta: torch.Tensor
    sigma: torch.Tensor
    color: torch.Tensor
    T: torch.Tensor | None = None
    w: torch.Tensor | None = None


def make_sample_batch(rays: RayBundle, t: torch.Tensor, sigma, color) -> RaySampleBatch:
    if (t.diff(dim=-1) < 0).any():
        raise DomainError("sample depths must be ascending per ray")
    x = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    delta = torch.cat([t.diff(dim=-1), rays.far - t[:, -1:]], dim=-1)
    return RaySampleBatch(t=t, x=x, delta=delta, sigma=sigma, color=color)


def transmittance(sigma: torch.Tensor, delta: torch.Tensor):
    """T_i = exp(-sum_{j<i} sigma_j delta_j) and w_i = T_i (1 - exp(-sigma_i delta_i))."""
    if (sigma < 0).any():
        raise DomainError("negative density")
    if (delta < -1e-9).any():
        raise DomainError("negative sample spacing")
    tau = sigma * delta.clamp_min(0.0)
    acc = torch.cumsum(tau, dim=-1)
    T = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))
    w = T * (1.0 - torch.exp(-tau))
    return T, w


def composite(batch: RaySampleBatch):
    """Composite a sample batch into per-ray color and expected depth.

    Returns (color (R, 3), depth (R,), batch with T and w filled). The
    expected depth is the w-weighted mean of t with a numerical floor on the
    weight sum; unallocated mass contributes black.
    """
    T, w = transmittance(batch.sigma, batch.delta)
    color = (w[..., None] * batch.color).sum(dim=-2)
    depth = (w * batch.t).sum(dim=-1) / (w.sum(dim=-1).clamp_min(EPS_NUM))
    return color, depth, replace(batch, T=T, w=w)


@dataclass
class SamplingConfig:
    """Hierarchical sampling knobs: per-ray fine budget (the coarse budget
    matches it), optional near/far override, ray chunk size for memory."""

    ray_steps: int = 16
    near: float | None = None
    far: float | None = None
    bounding_radius: float = 1.0
    chunk: int = 16384


@dataclass
class RenderResult:
    rgb: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor


def render_rays(
    G: RadianceGenerator,
    mods: Modulations,
    rays: RayBundle,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    feature_layer: int | None = None,
):
    """Hierarchical render of a ray bundle.

    Coarse stratified pass (no grad) drives importance sampling; the union
    of coarse and fine depths is re-queried for the final composite.
    Returns (rgb (R, 3), depth (R,), opacity (R,)[, feature map (R, width)]).
    """
    n = len(rays)
    rgb = []
    depth = []
    opac = []
    feat = []
    for lo in range(0, n, cfg.chunk):
        sub = rays.select(slice(lo, lo + cfg.chunk))
        r = len(sub)
        t_c = stratified_depths(sub.near, sub.far, cfg.ray_steps, r, rng, dtype=sub.origins.dtype)
        with torch.no_grad():
            x_c = sub.origins[:, None, :] + t_c[..., None] * sub.directions[:, None, :]
            sig_c = G.query(x_c, mods, need_features=False, need_color=False).sigma
            delta_c = torch.cat([t_c.diff(dim=-1), sub.far - t_c[:, -1:]], dim=-1)
            _, w_c = transmittance(sig_c, delta_c)
        t_f = importance_depths(sub.near, sub.far, w_c, cfg.ray_steps, rng)
        t_u, _ = torch.sort(torch.cat([t_c, t_f], dim=-1), dim=-1)
        x_u = sub.origins[:, None, :] + t_u[..., None] * sub.directions[:, None, :]
        out = G.query(
            x_u,
            mods,
            d=sub.directions[:, None, :],
            need_features=feature_layer is not None,
        )
        batch = make_sample_batch(sub, t_u, out.sigma, out.color)
        c, d, batch = composite(batch)
        rgb.append(c)
        depth.append(d)
        opac.append(batch.w.sum(dim=-1))
        if feature_layer is not None:
            f = (batch.w[..., None] * out.features[..., feature_layer, :]).sum(dim=-2)
            feat.append(f)
    rgb = torch.cat(rgb)
    depth = torch.cat(depth)
    opac = torch.cat(opac)
    if feature_layer is not None:
        return rgb, depth, opac, torch.cat(feat)
    return rgb, depth, opac


def render_image(
    G: RadianceGenerator,
    mods: Modulations,
    pose: CameraPose,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> RenderResult:
    """Render an image via hierarchical sampling; deterministic per rng state."""
    rays = generate_rays(pose, cfg.near, cfg.far, cfg.bounding_radius)
    rgb, depth, opac = render_rays(G, mods, rays, cfg, rng)
    h, w = pose.height, pose.width
    return RenderResult(rgb.reshape(h, w, 3), depth.reshape(h, w), opac.reshape(h, w))


def project_feature_map(
    G: RadianceGenerator,
    mods: Modulations,
    pose: CameraPose,
    layer: int,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Per-pixel compositing of one trunk layer's features, (H, W, width)."""
    if layer >= G.cfg.depth:
        raise DomainError(f"layer {layer} >= trunk depth {G.cfg.depth}")
    rays = generate_rays(pose, cfg.near, cfg.far, cfg.bounding_radius)
    _, _, _, feat = render_rays(G, mods, rays, cfg, rng, feature_layer=layer)
    return feat.reshape(pose.height, pose.width, G.cfg.width)


def select_foreground_rays(
    depth: torch.Tensor,
    opacity: torch.Tensor,
    depth_mask: float,
    sampling_ratio: float,
    rng: np.random.Generator,
    max_rays: int | None = None,
    min_opacity: float = 0.5,
) -> np.ndarray:
    """Indices of foreground rays, uniformly subsampled at sampling_ratio.

    A ray survives when its expected termination depth is within the depth
    mask and its weight sum is at least min_opacity (background = low
    opacity). Raises EmptyForegroundError when nothing survives so the
    caller can resample the instance.
    """
    if not (0.0 < sampling_ratio <= 1.0):
        raise DomainError(f"sampling_ratio {sampling_ratio} outside (0, 1]")
    keep = (opacity >= min_opacity) & (depth <= depth_mask)
    idx = np.nonzero(keep.detach().cpu().numpy())[0]
    if idx.size == 0:
        raise EmptyForegroundError("no foreground rays survived the depth/opacity mask")
    n_take = max(1, int(round(sampling_ratio * idx.size)))
    if max_rays is not None:
        n_take = min(n_take, max_rays)
    if n_take < idx.size:
        idx = np.sort(rng.choice(idx, size=n_take, replace=False))
    return idx
