"""Synthetic star-shaped category with analytic ground truth.

Each instance is a smooth radial shape r(direction) = theta . basis(direction)
carrying a Gaussian density shell around its surface and an angular texture
(direction palette times phase-shifted stripes). The intrinsic chart
(angles, radial offset) gives exact dense correspondence between any two
instances, plus chart-defined segment labels and keypoints. A conditioned
generator regression-fit to this category stands in for a pretrained
radiance-field GAN: latents are standardized shape parameters, so sampling
new instances from the prior is exact and every latent keeps its ground
truth attached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError, FitError
from .fields import GeneratorConfig, Modulations, RadianceGenerator, RadianceOutput

D_SHAPE = 8  # base radius, 3 axis anisotropies, 4 angular bump amplitudes
SIGMA_MAX = 40.0
SHELL_WIDTH = 0.03
LABEL_BAND = 3.0 * SHELL_WIDTH
NUM_CLASSES = 8
NUM_KEYPOINTS = 98
SENTINEL = 255


def _bump_normalizers() -> np.ndarray:
    u = fibonacci_directions(4096)
    g = _raw_bumps(u)
    return np.abs(g).max(axis=0)


def _raw_bumps(u: np.ndarray) -> np.ndarray:
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack(
        [
            0.5 * (5.0 * z**3 - 3.0 * z),
            x * (5.0 * z**2 - 1.0),
            z * (x**2 - y**2),
            x * (x**2 - 3.0 * y**2),
        ],
        axis=-1,
    )


def fibonacci_directions(n: int) -> np.ndarray:
    """Deterministic quasi-uniform unit directions (n, 3)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    s = np.sqrt(np.maximum(1.0 - z**2, 0.0))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


_BUMP_NORM = _bump_normalizers()


def radius_basis(u: np.ndarray) -> np.ndarray:
    """Basis functions of direction for the radius map, (..., 8).

    [1, u_x^2 - 1/3, u_y^2 - 1/3, u_z^2 - 1/3, four odd third-order
    harmonics scaled to unit max]. Even and odd blocks are orthogonal on the
    sphere.
    """
    quad = u**2 - 1.0 / 3.0
    bumps = _raw_bumps(u) / _BUMP_NORM
    return np.concatenate([np.ones(u.shape[:-1] + (1,)), quad, bumps], axis=-1)


@dataclass
class ToyPrior:
    """Truncated-Gaussian prior over shape parameters and texture phase."""

    mean: np.ndarray = field(default_factory=lambda: np.array([0.55] + [0.0] * 7))
    std: np.ndarray = field(
        default_factory=lambda: np.array([0.07, 0.05, 0.05, 0.05, 0.035, 0.035, 0.035, 0.035])
    )
    phase_std: float = 0.5
    r_min: float = 0.15
    r_max: float = 0.85
    trunc: float = 3.0


@dataclass(frozen=True)
class ToyInstance:
    """Shape parameters theta (8,) and texture phase (radians)."""

    theta: tuple
    phase: float

    @property
    def theta_array(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=np.float64)


_CHECK_DIRS = fibonacci_directions(2048)


def surface_radius(inst: ToyInstance, u: np.ndarray) -> np.ndarray:
    return radius_basis(u) @ inst.theta_array


def _radius_ok(theta: np.ndarray, prior: ToyPrior) -> bool:
    r = radius_basis(_CHECK_DIRS) @ theta
    return bool(r.min() >= prior.r_min and r.max() <= prior.r_max)


def sample_instance(rng: np.random.Generator, prior: ToyPrior | None = None) -> ToyInstance:
    """Draw one instance; rejection keeps the surface inside its bounds."""
    prior = prior or ToyPrior()
    for _ in range(256):
        raw = np.clip(rng.standard_normal(D_SHAPE), -prior.trunc, prior.trunc)
        theta = prior.mean + prior.std * raw
        phase = float(np.clip(rng.standard_normal(), -prior.trunc, prior.trunc) * prior.phase_std)
        if _radius_ok(theta, prior):
            return ToyInstance(tuple(theta.tolist()), phase)
    raise DomainError("prior rejection failed 256 times; prior badly configured")


def chart_coords(inst: ToyInstance, x: np.ndarray):
    """Intrinsic coordinates (theta_hat, phi_hat, rho) of points (..., 3).

    rho is the signed offset along the ray from the origin, measured off the
    instance surface; points at the origin have no chart and are rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    nrm = np.linalg.norm(x, axis=-1)
    if (nrm < 1e-9).any():
        raise DomainError("chart undefined at the origin")
    u = x / nrm[..., None]
    theta_hat = np.arccos(np.clip(u[..., 2], -1.0, 1.0))
    phi_hat = np.arctan2(u[..., 1], u[..., 0])
    rho = nrm - surface_radius(inst, u)
    return theta_hat, phi_hat, rho


def chart_point(inst: ToyInstance, theta_hat, phi_hat, rho) -> np.ndarray:
    """Inverse chart: realize (angles, offset) as a 3D point."""
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    s = np.sin(theta_hat)
    u = np.stack([s * np.cos(phi_hat), s * np.sin(phi_hat), np.cos(theta_hat)], axis=-1)
    r = surface_radius(inst, u) + np.asarray(rho, dtype=np.float64)
    return r[..., None] * u


def gt_correspond(a: ToyInstance, b: ToyInstance, x: np.ndarray) -> np.ndarray:
    """Exact correspondent of a-space points in b-space: identical chart
    angles, identical offset off b's surface."""
    x = np.asarray(x, dtype=np.float64)
    nrm = np.linalg.norm(x, axis=-1)
    if (nrm < 1e-9).any():
        raise DomainError("correspondence undefined at the origin")
    u = x / nrm[..., None]
    rho = nrm - surface_radius(a, u)
    r_b = surface_radius(b, u) + rho
    return r_b[..., None] * u


def _direction_color(u: np.ndarray, phase: float) -> np.ndarray:
    sin_th_sq = 1.0 - u[..., 2] ** 2
    phi = np.arctan2(u[..., 1], u[..., 0])
    stripe = np.sin(6.0 * phi + phase) * sin_th_sq
    base = 0.5 + 0.45 * u
    return base * (0.72 + 0.28 * stripe[..., None])


def analytic_radiance(inst: ToyInstance, x: np.ndarray):
    """Analytic density and color at points (..., 3).

    Density is a Gaussian shell around the surface; color is the angular
    texture (smooth away from the origin), constant through the shell.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise DomainError("non-finite query point")
    nrm = np.linalg.norm(x, axis=-1)
    safe = np.maximum(nrm, 1e-9)
    u = x / safe[..., None]
    rho = nrm - surface_radius(inst, u)
    sigma = SIGMA_MAX * np.exp(-(rho**2) / (2.0 * SHELL_WIDTH**2))
    color = np.clip(_direction_color(u, inst.phase), 0.0, 1.0)
    return sigma, color


class AnalyticField:
    """Adapter exposing the analytic fields through the generator's query
    interface so the renderer can drive them directly (oracle renders)."""

    def __init__(self, inst: ToyInstance):
        self.inst = inst

    def query(self, x, mods=None, d=None, need_features=False, need_color=True):
        xn = x.detach().cpu().numpy()
        sigma, color = analytic_radiance(self.inst, xn)
        return RadianceOutput(
            torch.as_tensor(sigma, dtype=x.dtype),
            torch.as_tensor(color, dtype=x.dtype) if need_color else None,
            None,
        )


def sector_label(x: np.ndarray) -> np.ndarray:
    """Chart-defined class id of the angular octant holding each point."""
    x = np.asarray(x, dtype=np.float64)
    return (
        (x[..., 0] > 0).astype(np.int64)
        + 2 * (x[..., 1] > 0).astype(np.int64)
        + 4 * (x[..., 2] > 0).astype(np.int64)
    )


@dataclass
class ToyAnnotations:
    """Chart-derived labels and keypoints for one instance.

    label_of(x) returns the octant class for points within the shell band
    and the background sentinel elsewhere; keypoints are fixed chart angles
    realized on the instance surface.
    """

    inst: ToyInstance
    keypoint_angles: np.ndarray
    keypoints_3d: np.ndarray

    def label_of(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        nrm = np.linalg.norm(x, axis=-1)
        u = x / np.maximum(nrm, 1e-9)[..., None]
        rho = nrm - surface_radius(self.inst, u)
        lab = sector_label(x)
        return np.where(np.abs(rho) <= LABEL_BAND, lab, SENTINEL)


def gt_annotations(inst: ToyInstance) -> ToyAnnotations:
    dirs = fibonacci_directions(NUM_KEYPOINTS)
    theta_hat = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi_hat = np.arctan2(dirs[:, 1], dirs[:, 0])
    kp3d = chart_point(inst, theta_hat, phi_hat, np.zeros(NUM_KEYPOINTS))
    return ToyAnnotations(inst, np.stack([theta_hat, phi_hat], axis=-1), kp3d)


class ToyCategory:
    """Prior + latent bookkeeping for the synthetic category.

    Latents are the standardized (theta, phase) vector zero-padded to d_z,
    so standardization is exactly invertible and prior sampling is exact.
    """

    def __init__(self, prior: ToyPrior | None = None, d_z: int = 16):
        self.prior = prior or ToyPrior()
        if d_z < D_SHAPE + 1:
            raise DomainError(f"d_z must be >= {D_SHAPE + 1}")
        self.d_z = d_z

    def standardize(self, inst: ToyInstance) -> np.ndarray:
        z = np.zeros(self.d_z)
        z[:D_SHAPE] = (inst.theta_array - self.prior.mean) / self.prior.std
        z[D_SHAPE] = inst.phase / self.prior.phase_std
        return z

    def unstandardize(self, z: np.ndarray) -> ToyInstance:
        z = np.asarray(z, dtype=np.float64)
        theta = self.prior.mean + self.prior.std * z[: D_SHAPE]
        return ToyInstance(tuple(theta.tolist()), float(z[D_SHAPE] * self.prior.phase_std))

    def sample(self, rng: np.random.Generator) -> ToyInstance:
        return sample_instance(rng, self.prior)

    def latent_sampler(self, rng: np.random.Generator, n: int) -> torch.Tensor:
        z = np.stack([self.standardize(self.sample(rng)) for _ in range(n)])
        return torch.as_tensor(z, dtype=torch.float32)


def save_instances(path, instances: list[ToyInstance], seed: int | None = None) -> None:
    data = {
        "seed": seed,
        "instances": [{"theta": list(i.theta), "phase": i.phase} for i in instances],
    }
    with open(path, "w") as f:
        json.dump(data, f)


def load_instances(path) -> list[ToyInstance]:
    with open(path) as f:
        data = json.load(f)
    return [ToyInstance(tuple(e["theta"]), e["phase"]) for e in data["instances"]]


@dataclass
class FitConfig:
    """Regression-fit budget and quality gates for the toy generator."""

    steps: int = 12000
    batch: int = 3072
    lr: float = 1.5e-3
    lr_final: float = 2e-4
    density_rel_tol: float = 0.10
    color_mae_tol: float = 0.05
    early_stop_fraction: float = 0.55
    check_every: int = 1500
    holdout_points: int = 4096
    fresh_fraction: float = 0.5
    color_min_radius: float = 0.2
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


def _fit_points(insts, rng, n, color_min_radius):
    """Mixed near-shell / uniform-cube training points with analytic targets."""
    per = np.full(len(insts), n // len(insts))
    per[: n - per.sum()] += 1
    xs, sig, col, mask, owner = [], [], [], [], []
    for k, inst in enumerate(insts):
        m = per[k]
        n_shell = int(0.6 * m)
        u = rng.standard_normal((n_shell, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        rho = rng.normal(0.0, 3.0 * SHELL_WIDTH, size=n_shell)
        x_shell = (surface_radius(inst, u) + rho)[:, None] * u
        x_cube = rng.uniform(-1.0, 1.0, size=(m - n_shell, 3))
        x = np.concatenate([x_shell, x_cube])
        s, c = analytic_radiance(inst, x)
        xs.append(x)
        sig.append(s)
        col.append(c)
        mask.append(np.linalg.norm(x, axis=-1) >= color_min_radius)
        owner.append(np.full(m, k))
    return (
        np.concatenate(xs),
        np.concatenate(sig),
        np.concatenate(col),
        np.concatenate(mask),
        np.concatenate(owner),
    )


def _holdout_error(G, category, rng, n_points):
    """Density (relative to peak) and color errors on fresh shell points."""
    insts = [category.sample(rng) for _ in range(8)]
    z = torch.as_tensor(np.stack([category.standardize(i) for i in insts]), dtype=torch.float32)
    per = n_points // len(insts)
    d_errs, c_errs = [], []
    with torch.no_grad():
        mods = G.map_latent(z)
        for k, inst in enumerate(insts):
            u = rng.standard_normal((per, 3))
            u /= np.linalg.norm(u, axis=-1, keepdims=True)
            rho = rng.uniform(-SHELL_WIDTH, SHELL_WIDTH, size=per)
            x = (surface_radius(inst, u) + rho)[:, None] * u
            s_gt, c_gt = analytic_radiance(inst, x)
            out = G.query(
                torch.as_tensor(x, dtype=torch.float32),
                Modulations(mods.gamma[k], mods.beta[k]),
            )
            d_errs.append(np.abs(out.sigma.numpy() - s_gt).mean() / SIGMA_MAX)
            c_errs.append(np.abs(out.color.numpy() - c_gt).mean())
    return float(np.mean(d_errs)), float(np.mean(c_errs))


def fit_generator(instances: list[ToyInstance], config: FitConfig, category: ToyCategory | None = None):
    """Regression-fit the conditioned generator to the analytic category.

    Minimizes MSE between generator (sigma, color) and the analytic fields
    over mixed near-shell/uniform points; batches also draw fresh prior
    instances so the generator covers the category manifold, not only the
    listed training set. Returns (frozen generator, per-instance latents).
    Raises FitError when the held-out gates are still unmet after the budget.
    """
    if len(instances) < 64:
        raise DomainError("need at least 64 instances to fit")
    category = category or ToyCategory(d_z=config.generator.d_z)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(0xF17,)))
    G = RadianceGenerator(config.generator, seed=config.seed)
    opt = torch.optim.Adam(G.parameters(), lr=config.lr)
    gamma = (config.lr_final / config.lr) ** (1.0 / max(config.steps, 1))
    z_listed = np.stack([category.standardize(i) for i in instances])
    last = (np.inf, np.inf)
    for step in range(config.steps):
        n_fresh = int(config.fresh_fraction * 12)
        fresh = [category.sample(rng) for _ in range(n_fresh)]
        listed_idx = rng.integers(0, len(instances), size=12 - n_fresh)
        batch_insts = [instances[i] for i in listed_idx] + fresh
        z = np.concatenate([z_listed[listed_idx], [category.standardize(i) for i in fresh]])
        x, s_gt, c_gt, cmask, owner = _fit_points(batch_insts, rng, config.batch, config.color_min_radius)
        xt = torch.as_tensor(x, dtype=torch.float32)
        zt = torch.as_tensor(z, dtype=torch.float32)
        mods = G.map_latent(zt)
        own = torch.as_tensor(owner)
        per_point = Modulations(mods.gamma[own], mods.beta[own])
        out = G.query(xt.unsqueeze(1), per_point, need_features=False)
        sig = out.sigma.squeeze(1)
        col = out.color.squeeze(1)
        s_t = torch.as_tensor(s_gt / SIGMA_MAX, dtype=torch.float32)
        c_t = torch.as_tensor(c_gt, dtype=torch.float32)
        m_t = torch.as_tensor(cmask)
        loss = ((sig / SIGMA_MAX - s_t) ** 2).mean()
        if m_t.any():
            loss = loss + ((col - c_t) ** 2).sum(-1)[m_t].mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        for g in opt.param_groups:
            g["lr"] *= gamma
        if (step + 1) % config.check_every == 0 or step + 1 == config.steps:
            last = _holdout_error(G, category, rng, config.holdout_points)
            frac = config.early_stop_fraction
            if last[0] < frac * config.density_rel_tol and last[1] < frac * config.color_mae_tol:
                break
    if last[0] >= config.density_rel_tol or last[1] >= config.color_mae_tol:
        raise FitError(
            f"fit gates unmet after {config.steps} steps: density {last[0]:.4f}, color {last[1]:.4f}",
            held_out_error=last,
        )
    G.requires_grad_(False)
    G.eval()
    latents = torch.as_tensor(z_listed, dtype=torch.float32)
    return G, latents
