"""Channel reconstruction by Euler integration of the learned velocity
field, conditioned on the encoder latent of the partially observed epoch.

The decoder never sees the observed signals directly: integration starts
from Gaussian noise for every channel and all observational information
flows through the latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import FlowAutoencoder, ModelError
from .pipeline import Epoch, TRAIN_SCALE
from .tokenizer import (
    WINDOW_SAMPLES,
    interleave_registers,
    raster_serialize,
    window_tokens,
)
from .training import NOISE_SD, DropoutPlan


@dataclass(frozen=True)
class SamplerConfig:
    """Euler integrator settings."""

    n_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ModelError("sampler needs at least one step")


def _check_model_ready(model: FlowAutoencoder):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ModelError(f"model parameter {name} contains non-finite values")


def reconstruct_batch(
    model: FlowAutoencoder,
    epochs: list[Epoch],
    plans: list[DropoutPlan],
    cfg: SamplerConfig = SamplerConfig(),
    keep_observed: bool = True,
) -> list[Epoch]:
    """Reconstruct several same-montage epochs in one batched integration.

    Epochs must be in the SD-0.1 training scale; outputs are de-scaled to
    z-score units. With ``keep_observed`` the non-dropped channels of the
    result are the (de-scaled) input signals rather than model output.
    """
    if not epochs:
        return []
    _check_model_ready(model)
    c = epochs[0].n_channels
    base_pos = epochs[0].geometry.positions
    for epoch in epochs[1:]:
        if epoch.n_channels != c or not np.array_equal(
            epoch.geometry.positions, base_pos
        ):
            raise ModelError("batched reconstruction needs a shared montage")
    for plan in plans:
        if plan.mask.all():
            raise ModelError("dropout plan removes every channel")

    grids = [window_tokens(e, dropout=p.mask) for e, p in zip(epochs, plans)]
    seqs = [raster_serialize(g) for g in grids]
    inters = [interleave_registers(s, model.cfg.register_stride) for s in seqs]

    p = next(model.parameters())
    dev, dtype = p.device, p.dtype
    enc_tokens = torch.as_tensor(
        np.stack([s.tokens for s in inters]), dtype=dtype, device=dev
    )
    enc_coords = torch.as_tensor(inters[0].coords, device=dev)
    is_reg = torch.as_tensor(inters[0].is_register, device=dev)
    dec_coords = torch.as_tensor(seqs[0].coords, device=dev)

    rng = np.random.default_rng(cfg.seed)
    b, l = len(epochs), len(seqs[0])
    x = torch.as_tensor(
        rng.normal(0.0, NOISE_SD, size=(b, l, WINDOW_SAMPLES)), dtype=dtype, device=dev
    )
    dt = 1.0 / cfg.n_steps
    with torch.no_grad():
        latent = model.encode_tokens(enc_tokens, enc_coords, is_reg)
        for i in range(cfg.n_steps):
            t = torch.full((b,), 1.0 - i * dt, dtype=dtype, device=dev)
            v = model.decode_tokens(x, t, latent, dec_coords, is_reg)
            x = x - dt * v

    out_windows = x.cpu().numpy() / TRAIN_SCALE
    results = []
    for i, epoch in enumerate(epochs):
        m = epoch.samples.shape[1] // WINDOW_SAMPLES
        samples = (
            out_windows[i].reshape(m, c, WINDOW_SAMPLES).transpose(1, 0, 2).reshape(c, -1)
        )
        if keep_observed:
            observed = ~plans[i].mask
            samples[observed] = epoch.samples[observed] / TRAIN_SCALE
        results.append(
            Epoch(samples, epoch.geometry, epoch.bad_channels.copy(), epoch.source_offset)
        )
    return results


def reconstruct(
    model: FlowAutoencoder,
    epoch: Epoch,
    plan: DropoutPlan,
    cfg: SamplerConfig = SamplerConfig(),
    keep_observed: bool = True,
) -> Epoch:
    """Reconstruct one epoch's dropped channels; see reconstruct_batch."""
    return reconstruct_batch(model, [epoch], [plan], cfg, keep_observed)[0]


def nmse(recon: Epoch, truth: Epoch, plan: DropoutPlan) -> float:
    """Normalized mean squared error over the dropped channels only.

    Error power divided by ground-truth power; invariant under joint
    rescaling of reconstruction and truth.
    """
    if recon.samples.shape != truth.samples.shape:
        raise ModelError("reconstruction and truth shapes differ")
    mask = plan.mask
    if not mask.any():
        raise ModelError("NMSE needs at least one dropped channel")
    err = recon.samples[mask] - truth.samples[mask]
    denom = float((truth.samples[mask] ** 2).sum())
    if denom == 0.0:
        raise ModelError("ground truth has zero power on dropped channels")
    return float((err**2).sum() / denom)
