"""Shared fixtures.

The expensive artifacts (fit toy generator, desk distillation run,
ablation runs) are session-scoped and built once. Set NERFCORR_TEST_CACHE
to a directory to persist them across pytest sessions during development;
unset, everything is built fresh.
"""

import os
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


class LinearField:
    """Deformation-field stand-in with residual H(x) = x @ A.T + b."""

    def __init__(self, A=None, b=None, dtype=torch.float32):
        self.A = torch.zeros(3, 3, dtype=dtype) if A is None else torch.as_tensor(A, dtype=dtype)
        self.b = torch.zeros(3, dtype=dtype) if b is None else torch.as_tensor(b, dtype=dtype)

    def residual(self, x, z):
        return x @ self.A.T + self.b

    def __call__(self, x, z):
        return x + self.residual(x, z)

    def parameters(self):
        return []


@pytest.fixture
def linear_field():
    return LinearField


def _cache_dir():
    p = os.environ.get("NERFCORR_TEST_CACHE")
    if p:
        Path(p).mkdir(parents=True, exist_ok=True)
        return Path(p)
    return None


@pytest.fixture(scope="session")
def toy_setup():
    """64-instance toy category with a regression-fit frozen generator."""
    from nerfcorr import toyworld
    from nerfcorr.fields import GeneratorConfig, RadianceGenerator
    from nerfcorr.seeding import substream

    category = toyworld.ToyCategory(d_z=16)
    rng = substream(0, "instances")
    instances = [category.sample(rng) for _ in range(64)]
    cache = _cache_dir()
    gcfg = GeneratorConfig(d_z=16, depth=6, width=48)
    if cache is not None and (cache / "generator.pt").exists():
        G = RadianceGenerator(gcfg, seed=0)
        payload = torch.load(cache / "generator.pt", weights_only=True)
        G.load_state_dict(payload["state"])
        G.requires_grad_(False)
        G.eval()
        latents = payload["latents"]
    else:
        fit_cfg = toyworld.FitConfig(seed=0, generator=gcfg)
        G, latents = toyworld.fit_generator(instances, fit_cfg, category)
        if cache is not None:
            torch.save({"state": G.state_dict(), "latents": latents}, cache / "generator.pt")
    return {"G": G, "latents": latents, "instances": instances, "category": category}


@pytest.fixture(scope="session")
def desk_run(toy_setup, tmp_path_factory):
    """The 2000-iteration desk-scale distillation (headline acceptance run)."""
    import time

    from nerfcorr import pipeline
    from nerfcorr.config import parse_config
    from nerfcorr.training import load_checkpoint

    cfg = parse_config()
    G = toy_setup["G"]
    category = toy_setup["category"]
    template = pipeline.build_template(G, category, cfg)
    cache = _cache_dir()
    ckpt = cache / "desk_checkpoint.nac" if cache is not None else None
    if ckpt is not None and ckpt.exists():
        state = load_checkpoint(ckpt, G)
        elapsed = 0.0
        B, F = state.backward, state.forward
    else:
        out = tmp_path_factory.mktemp("desk-run")
        t0 = time.monotonic()
        B, F, _ = pipeline.distill(cfg, G, template, category, out_dir=out)
        elapsed = time.monotonic() - t0
        if ckpt is not None:
            (out / "checkpoint.nac").rename(ckpt)
    return {
        "B": B,
        "F": F,
        "template": template,
        "config": cfg,
        "elapsed": elapsed,
        **toy_setup,
    }
