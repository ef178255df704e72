"""Rectified-flow training with heavy channel dropout.

One training step draws clean epochs, zeroes a random channel subset in
the encoder input (coordinates are never dropped), noises all channels
along the linear path x_t = (1 - t) x0 + t eps, and regresses the decoder
onto the constant velocity eps - x0. The encoder latent is pulled toward
a Gaussian with an auxiliary MMD penalty, and per-timestep losses are
equalized with an EMA-based adaptive weight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .model import FlowAutoencoder, ModelError, save_checkpoint
from .pipeline import Epoch, TRAIN_SCALE
from .tokenizer import (
    WINDOW_SAMPLES,
    interleave_registers,
    raster_serialize,
    window_tokens,
)

NOISE_SD = TRAIN_SCALE  # noise matches the SD-0.1 data convention


class TrainError(RuntimeError):
    """Raised when a training contract is violated or a run diverges."""


@dataclass
class DropoutPlan:
    """Channels to drop for one sample; never all of them."""

    mask: np.ndarray  # (C,) bool
    k_dropped: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        c = self.mask.shape[0]
        if not 0 <= self.k_dropped <= max(c - 1, 0):
            raise TrainError(f"k_dropped {self.k_dropped} out of range for C={c}")
        if int(self.mask.sum()) != self.k_dropped:
            raise TrainError("mask population does not match k_dropped")


@dataclass
class FlowSample:
    """One linear-interpolation training point between data and noise."""

    x0: np.ndarray
    eps: np.ndarray
    t: float
    x_t: np.ndarray = field(init=False)
    v_target: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise TrainError(f"flow time must lie in [0, 1], got {self.t}")
        self.x_t = (1.0 - self.t) * self.x0 + self.t * self.eps
        self.v_target = self.eps - self.x0


@dataclass
class TrainConfig:
    """Optimizer, schedule, and loss settings."""

    total_steps: int = 1000
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    warmup_frac: float = 0.01
    grad_accum: int = 1
    mmd_weight: float = 0.1
    mmd_max_points: int = 256
    alw_bins: int = 64
    alw_decay: float = 0.99
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 50

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise TrainError("lr_min must be below lr_max")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise TrainError("betas must lie in (0, 1)")
        if self.total_steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise TrainError("steps, batch size, and grad_accum must be >= 1")


def save_train_config(path, cfg: TrainConfig):
    """Write a plain-text key = value config file."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_kv_file(path) -> dict[str, str]:
    """Parse '# comment' and 'key = value' lines into a string dict."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TrainError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_train_config(path) -> TrainConfig:
    """Read a TrainConfig from a plain-text key = value file.

    Unknown keys are rejected so typos fail loudly.
    """
    raw = parse_kv_file(path)
    known = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise TrainError(f"unknown training config key: {key}")
        if key == "betas":
            kwargs[key] = tuple(float(x) for x in value.split(","))
        elif known[key].type in ("int", int):
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return TrainConfig(**kwargs)


def sample_dropout(c: int, rng: np.random.Generator) -> DropoutPlan:
    """Draw the training dropout plan for a C-channel sample.

    With probability 0.1 nothing is dropped. Otherwise, with probability
    0.8 the count is uniform in {1 .. floor(C/2)} and with probability 0.2
    uniform in {floor(C/2) .. C-1}; channels are chosen uniformly without
    replacement. A single-channel sample is never dropped.
    """
    mask = np.zeros(c, dtype=bool)
    if c <= 1 or rng.random() >= 0.9:
        return DropoutPlan(mask, 0)
    half = c // 2
    if rng.random() < 0.8:
        k = int(rng.integers(1, half + 1))
    else:
        k = int(rng.integers(half, c))
    k = max(1, min(k, c - 1))
    mask[rng.choice(c, size=k, replace=False)] = True
    return DropoutPlan(mask, k)


class AlwState:
    """Per-timestep-bin EMA of the unweighted loss for adaptive weighting."""

    def __init__(self, n_bins: int = 64, decay: float = 0.99):
        self.n_bins = n_bins
        self.decay = decay
        self.ema = np.ones(n_bins, dtype=np.float64)

    def bin_of(self, t: float) -> int:
        return min(int(t * self.n_bins), self.n_bins - 1)

    def update(self, t: float, loss: float):
        b = self.bin_of(t)
        self.ema[b] = self.decay * self.ema[b] + (1.0 - self.decay) * loss


def adaptive_weight(t: float, state: AlwState) -> float:
    """Loss weight for flow time t: mean EMA over its bin's EMA, clamped."""
    if not 0.0 <= t <= 1.0:
        raise TrainError(f"flow time must lie in [0, 1], got {t}")
    w = state.ema.mean() / state.ema[state.bin_of(t)]
    return float(np.clip(w, 0.1, 10.0))


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise squared Euclidean distances, differentiable everywhere."""
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return torch.clamp(d2, min=0.0)


def mmd_loss(latents: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Biased (V-statistic) squared MMD to a standard Gaussian reference.

    RBF kernel with bandwidth set to the median pairwise distance of the
    joint sample; the biased estimator is non-negative by construction.
    """
    if latents.ndim != 2 or latents.shape[0] < 2:
        raise TrainError("mmd_loss needs at least 2 latent vectors")
    n = latents.shape[0]
    ref = torch.as_tensor(
        rng.standard_normal((n, latents.shape[1])),
        dtype=latents.dtype,
        device=latents.device,
    )
    joint = torch.cat([latents, ref], dim=0)
    d2 = _sq_dists(joint, joint)
    off_diag = d2[~torch.eye(2 * n, dtype=torch.bool, device=d2.device)]
    # median distance = sqrt of median squared distance (sqrt is monotone)
    sigma_sq = torch.clamp(off_diag.median(), min=1e-24)

    def k(a, b):
        return torch.exp(-_sq_dists(a, b) / (2.0 * sigma_sq))

    return k(latents, latents).mean() + k(ref, ref).mean() - 2.0 * k(latents, ref).mean()


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine schedule from lr_max to lr_min with short linear warmup."""
    if not 0 <= step <= cfg.total_steps:
        raise TrainError(f"step {step} outside [0, {cfg.total_steps}]")
    lr = cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (
        1.0 + math.cos(math.pi * step / cfg.total_steps)
    )
    warmup = int(round(cfg.warmup_frac * cfg.total_steps))
    if warmup > 0 and step < warmup:
        lr *= (step + 1) / warmup
    return lr


class EpochBatcher:
    """Caches tokenized epochs so the training loop avoids re-windowing.

    All epochs must share one channel count and geometry (the desk-scale
    corpus is single-montage); window tensors are kept in float32.
    """

    def __init__(self, epochs: list[Epoch], register_stride: int):
        if not epochs:
            raise TrainError("empty training corpus")
        c = epochs[0].n_channels
        if any(e.n_channels != c for e in epochs):
            raise TrainError("corpus epochs must share a channel count")
        self.n_channels = c
        base = raster_serialize(window_tokens(epochs[0]))
        inter = interleave_registers(base, register_stride)
        self.data_coords = base.coords
        self.enc_coords = inter.coords
        self.enc_is_register = inter.is_register
        self.data_slots = np.flatnonzero(~inter.is_register)
        self.n_tokens = len(base)
        self.n_enc_tokens = len(inter)
        self.x0 = np.stack(
            [
                window_tokens(e).windows.transpose(1, 0, 2).reshape(-1, WINDOW_SAMPLES)
                for e in epochs
            ]
        ).astype(np.float32)

    def gather(self, idx, masks):
        """Return (x0, enc_tokens) float32 arrays for the chosen epochs.

        ``masks`` holds one per-channel dropout mask per chosen epoch;
        encoder tokens carry zeros at dropped channels and register slots.
        """
        x0 = self.x0[idx]
        b, l, w = x0.shape
        enc = np.zeros((b, self.n_enc_tokens, w), dtype=np.float32)
        for i, mask in enumerate(masks):
            masked = x0[i].reshape(-1, self.n_channels, w).copy()
            masked[:, mask] = 0.0
            enc[i, self.data_slots] = masked.reshape(l, w)
        return x0, enc


def rectified_flow_step(
    model: FlowAutoencoder,
    batcher: EpochBatcher,
    idx: np.ndarray,
    rng: np.random.Generator,
    alw: AlwState,
    cfg: TrainConfig,
    t_sampler=None,
):
    """Assemble one batch, run the flow objective, and backpropagate.

    Returns (total_loss_value, flow_loss, mmd_value); gradients are
    accumulated into the model parameters.
    """
    c = batcher.n_channels
    masks = []
    ts = []
    for _ in range(len(idx)):
        masks.append(sample_dropout(c, rng).mask)
        ts.append(float(rng.random()) if t_sampler is None else float(t_sampler(rng)))
    x0_np, enc_np = batcher.gather(idx, masks)
    eps_np = rng.standard_normal(x0_np.shape) * NOISE_SD

    p = next(model.parameters())
    x0 = torch.as_tensor(x0_np, dtype=p.dtype, device=p.device)
    eps = torch.as_tensor(eps_np, dtype=p.dtype, device=p.device)
    t = torch.as_tensor(ts, dtype=p.dtype, device=p.device)
    x_t = (1.0 - t.view(-1, 1, 1)) * x0 + t.view(-1, 1, 1) * eps
    v_target = eps - x0

    enc_tokens = torch.as_tensor(enc_np, dtype=p.dtype, device=p.device)
    enc_coords = torch.as_tensor(batcher.enc_coords, device=p.device)
    dec_coords = torch.as_tensor(batcher.data_coords, device=p.device)
    is_reg = torch.as_tensor(batcher.enc_is_register, device=p.device)

    latent = model.encode_tokens(enc_tokens, enc_coords, is_reg)
    v_hat = model.decode_tokens(x_t, t, latent, dec_coords, is_reg)

    # per-sample mean over tokens of the squared per-token error norm
    per_sample = (v_hat - v_target).pow(2).sum(dim=-1).mean(dim=-1)
    weights = torch.as_tensor(
        [adaptive_weight(ti, alw) for ti in ts], dtype=p.dtype, device=p.device
    )
    flow_loss = (weights * per_sample).mean()

    pooled = latent.reshape(-1, latent.shape[-1])
    if pooled.shape[0] > cfg.mmd_max_points:
        rows = rng.choice(pooled.shape[0], size=cfg.mmd_max_points, replace=False)
        pooled = pooled[torch.as_tensor(rows, device=p.device)]
    mmd = mmd_loss(pooled, rng)

    total = flow_loss + cfg.mmd_weight * mmd
    if torch.isnan(total):
        raise TrainError(
            f"NaN loss (flow={float(flow_loss):g}, mmd={float(mmd):g})"
        )
    total.backward()
    for ti, li in zip(ts, per_sample.detach().cpu().numpy()):
        alw.update(ti, float(li))
    return float(total.detach()), float(flow_loss.detach()), float(mmd.detach())


def save_loss_trace(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "lr", "flow_loss", "mmd", "weighted_total"]
        )
        writer.writeheader()
        writer.writerows(rows)


def train(
    model: FlowAutoencoder,
    corpus: list[Epoch],
    cfg: TrainConfig,
    out_dir=None,
    t_sampler=None,
) -> list[dict]:
    """Run the full training loop; returns the loss trace.

    Deterministic for a fixed seed. Epochs must already be scaled to the
    SD-0.1 training convention. Checkpoints and the trace CSV are written
    under ``out_dir`` when given. Aborts on divergence (loss exceeding
    1000x the initial value) or NaN.
    """
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    batcher = EpochBatcher(corpus, model.cfg.register_stride)
    if cfg.batch_size > len(corpus):
        raise TrainError("batch size exceeds corpus size")
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr_max,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    alw = AlwState(cfg.alw_bins, cfg.alw_decay)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    trace: list[dict] = []
    initial_loss = None
    for step in range(cfg.total_steps):
        lr = lr_at(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        totals = np.zeros(3)
        for _ in range(cfg.grad_accum):
            idx = rng.choice(len(corpus), size=cfg.batch_size, replace=False)
            totals += rectified_flow_step(model, batcher, idx, rng, alw, cfg, t_sampler)
        if cfg.grad_accum > 1:
            for p in model.parameters():
                if p.grad is not None:
                    p.grad /= cfg.grad_accum
        optimizer.step()
        total, flow, mmd = totals / cfg.grad_accum

        if initial_loss is None:
            initial_loss = max(total, 1e-12)
        if total > 1e3 * initial_loss:
            if out_dir is not None:
                save_loss_trace(out_dir / "loss_trace.csv", trace)
            raise TrainError(
                f"divergence at step {step}: loss {total:g} vs initial {initial_loss:g}"
            )
        trace.append(
            {
                "step": step,
                "lr": lr,
                "flow_loss": flow,
                "mmd": mmd,
                "weighted_total": total,
            }
        )
        if out_dir is not None and cfg.checkpoint_every and (
            (step + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(
                out_dir / f"ckpt_{step + 1:06d}.zip",
                model,
                step=step + 1,
                loss_history=[r["weighted_total"] for r in trace],
            )
    if out_dir is not None:
        save_loss_trace(out_dir / "loss_trace.csv", trace)
        save_checkpoint(
            out_dir / "ckpt_final.zip",
            model,
            step=cfg.total_steps,
            loss_history=[r["weighted_total"] for r in trace],
        )
    return trace
