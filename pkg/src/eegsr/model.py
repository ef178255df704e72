"""Flow autoencoder network: token embedding, 4-axis rotary attention,
transformer encoder, and a velocity-predicting decoder conditioned on the
encoder latent and the flow time through adaptive RMS normalization.

Channels carry no identity beyond their coordinates, so the network is
equivariant to channel order and handles arbitrary electrode subsets.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .tokenizer import TokenSequence, visibility_mask

CHECKPOINT_MAGIC = "eegsr-checkpoint"


class ModelError(RuntimeError):
    """Raised for contract violations in model evaluation."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale config."""

    d_model: int = 128
    n_heads: int = 4
    head_dim: int = 32
    n_layers_enc: int = 4
    n_layers_dec: int = 4
    mlp_ratio: int = 4
    register_stride: int = 1
    rope_base: tuple[float, float, float, float] = (100.0, 100.0, 100.0, 10000.0)
    window: int = 32

    def __post_init__(self):
        if self.head_dim % 8 != 0:
            raise ModelError("head_dim must be divisible by 8 (4 axes x pairs)")
        if self.d_model != self.n_heads * self.head_dim:
            raise ModelError("d_model must equal n_heads * head_dim")


@dataclass
class LatentSequence:
    """Encoder output: one vector per interleaved token, registers included."""

    vectors: np.ndarray      # (L', D)
    coords: np.ndarray       # (L', 4)
    is_register: np.ndarray  # (L',) bool

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_data_tokens(self) -> int:
        return int((~self.is_register).sum())


@dataclass
class ParamStore:
    """Named parameter tensors plus the seed used at initialization."""

    tensors: dict[str, np.ndarray]
    seed: int

    def __post_init__(self):
        if len(self.tensors) != len(set(self.tensors)):
            raise ModelError("parameter names must be unique")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ModelError(f"non-finite parameter tensor {name}")


_ROTATION_CACHE: dict = {}


def _rotation_layout(head_dim: int, device):
    """Pair-partner index and sign for the grouped half rotation.

    Within each per-axis group of size g, dim j pairs with dim j + g/2:
    rot(x)[j] = -x[j + g/2] and rot(x)[j + g/2] = x[j].
    """
    key = (head_dim, str(device))
    if key in _ROTATION_CACHE:
        return _ROTATION_CACHE[key]
    group = head_dim // 4
    perm = torch.empty(head_dim, dtype=torch.long, device=device)
    sign = torch.empty(head_dim, device=device)
    for axis in range(4):
        lo = axis * group
        half = group // 2
        idx = torch.arange(half, device=device)
        perm[lo + idx] = lo + half + idx
        perm[lo + half + idx] = lo + idx
        sign[lo + idx] = -1.0
        sign[lo + half + idx] = 1.0
    _ROTATION_CACHE[key] = (perm, sign)
    return perm, sign


def rope_tables(
    coords: torch.Tensor, head_dim: int, base, dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    """Precompute cos/sin rotation tables for a coordinate sequence.

    coords: (..., L, 4) integer positions; returns (cos, sin) of shape
    (..., L, head_dim). Head dims split into 4 contiguous groups, one per
    axis; pair j of a group rotates by coord * base^(-2j / group_size).
    """
    if head_dim % 8 != 0:
        raise ModelError("head_dim must be divisible by 8 for 4-axis rotation")
    group = head_dim // 4
    j = torch.arange(group // 2, dtype=dtype, device=coords.device)
    angles = []
    for axis in range(4):
        freqs = float(base[axis]) ** (-2.0 * j / group)
        angle = coords[..., axis : axis + 1].to(dtype) * freqs
        angles.append(torch.cat([angle, angle], dim=-1))  # both half-pair slots
    angle = torch.cat(angles, dim=-1)
    return torch.cos(angle), torch.sin(angle)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor):
    """Rotate head vectors by precomputed tables (norm preserving)."""
    perm, sign = _rotation_layout(x.shape[-1], x.device)
    if cos.dim() < x.dim():  # broadcast over heads
        cos, sin = cos.unsqueeze(-3), sin.unsqueeze(-3)
    return x * cos + x[..., perm] * sign.to(x.dtype) * sin


def rope4d(
    q: torch.Tensor, k: torch.Tensor, coords: torch.Tensor, base=(100.0, 100.0, 100.0, 10000.0)
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotate query/key head dims by 4-axis positional angles.

    q, k: (..., L, head_dim); coords: (..., L, 4) integer positions.
    Rotations preserve norms and make dot products depend only on
    per-axis coordinate differences.
    """
    cos, sin = rope_tables(coords, q.shape[-1], base, q.dtype)
    return apply_rope(q, cos, sin), apply_rope(k, cos, sin)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x / rms * self.weight


class AdaRMSNorm(nn.Module):
    """RMS norm whose gain is modulated by a conditioning vector.

    out = (x / rms(x)) * (1 + gamma(cond)); gamma is zero-initialized so
    the module starts as a plain RMS norm.
    """

    def __init__(self, dim: int, cond_dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Linear(cond_dim, dim)
        nn.init.zeros_(self.gamma.weight)
        nn.init.zeros_(self.gamma.bias)

    def forward(self, x, cond):
        rms = torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x / rms * (1.0 + self.gamma(cond))


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, rope, vis=None):
        b, l, d = x.shape
        h, hd = self.cfg.n_heads, self.cfg.head_dim
        cos, sin = rope
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, l, h, hd).transpose(1, 2)
        k = k.view(b, l, h, hd).transpose(1, 2)
        v = v.view(b, l, h, hd).transpose(1, 2)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if vis is not None:
            scores = scores.masked_fill(~vis.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, d)
        return self.out(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.norm2 = RMSNorm(cfg.d_model)
        self.mlp = Mlp(cfg.d_model, cfg.mlp_ratio)

    def forward(self, x, rope, vis=None):
        x = x + self.attn(self.norm1(x), rope, vis)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = AdaRMSNorm(cfg.d_model, cfg.d_model)
        self.attn = Attention(cfg)
        self.norm2 = AdaRMSNorm(cfg.d_model, cfg.d_model)
        self.mlp = Mlp(cfg.d_model, cfg.mlp_ratio)

    def forward(self, x, cond, rope, vis=None):
        x = x + self.attn(self.norm1(x, cond), rope, vis)
        return x + self.mlp(self.norm2(x, cond))


class WindowMlp(nn.Module):
    """2-layer MLP mapping 32-sample windows to embeddings (or back)."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        self.act = nn.GELU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TimestepEmbed(nn.Module):
    """Sinusoidal features of the flow time (scaled by 1000) plus MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = WindowMlp(dim, dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        j = torch.arange(half, dtype=t.dtype, device=t.device)
        freqs = torch.exp(-math.log(10000.0) * j / half)
        arg = 1000.0 * t[:, None] * freqs[None, :]
        feats = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
        return self.mlp(feats)


class FlowAutoencoder(nn.Module):
    """Encoder over interleaved tokens plus a velocity-field decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        d = cfg.d_model
        self.token_encoder = WindowMlp(cfg.window, 4 * d, d)
        self.register = nn.Parameter(torch.zeros(d))
        self.enc_blocks = nn.ModuleList(
            EncoderBlock(cfg) for _ in range(cfg.n_layers_enc)
        )
        self.dec_embed = WindowMlp(cfg.window, 4 * d, d)
        self.latent_proj = nn.Linear(d, d)
        self.time_embed = TimestepEmbed(d)
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(cfg) for _ in range(cfg.n_layers_dec)
        )
        self.head_norm = AdaRMSNorm(d, d)
        self.head = WindowMlp(d, d, cfg.window)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
            else:
                nn.init.zeros_(p)
        for m in self.modules():
            if isinstance(m, RMSNorm):
                nn.init.ones_(m.weight)
            if isinstance(m, AdaRMSNorm):
                nn.init.zeros_(m.gamma.weight)
                nn.init.zeros_(m.gamma.bias)
        nn.init.trunc_normal_(self.register, std=0.02, a=-0.04, b=0.04, generator=gen)
        nn.init.zeros_(self.head.fc2.weight)
        nn.init.zeros_(self.head.fc2.bias)

    def randomize_parameters(self, seed: int):
        """Draw every parameter from N(0, 0.05); for structural tests that
        need a generic (non zero-initialized) point in parameter space."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)

    @staticmethod
    def _check_finite(x: torch.Tensor, stage: str, layer: int):
        if torch.isnan(x).any():
            raise ModelError(f"NaN activations after {stage} layer {layer}")

    def _rope(self, coords, dtype):
        return rope_tables(coords, self.cfg.head_dim, self.cfg.rope_base, dtype)

    def encode_tokens(self, tokens, coords, is_register, vis=None):
        """tokens (B, L', W), coords (B or none, L', 4), is_register (L',)."""
        h = self.token_encoder(tokens)
        h = torch.where(
            is_register.view(1, -1, 1), self.register.to(h.dtype), h
        )
        rope = self._rope(coords, h.dtype)
        for i, block in enumerate(self.enc_blocks):
            h = block(h, rope, vis)
            self._check_finite(h, "encoder", i)
        return h

    def _conditioning(self, latent, latent_is_register, t):
        """Per-token conditioning: aligned latent plus its group register
        plus the timestep embedding."""
        data = latent[:, ~latent_is_register]
        if latent_is_register.any():
            pos = torch.arange(latent.shape[1], device=latent.device)
            marker = torch.where(latent_is_register, pos, torch.full_like(pos, -1))
            last_reg = torch.cummax(marker, dim=0).values
            reg_idx = last_reg[~latent_is_register]
            data = data + latent[:, reg_idx]
        return self.latent_proj(data) + self.time_embed(t)[:, None, :]

    def decode_tokens(self, xt, t, latent, coords, latent_is_register, vis=None):
        """xt (B, L, W), t (B,), latent (B, L', D); returns velocities (B, L, W)."""
        cond = self._conditioning(latent, latent_is_register, t)
        h = self.dec_embed(xt)
        rope = self._rope(coords, h.dtype)
        for i, block in enumerate(self.dec_blocks):
            h = block(h, cond, rope, vis)
            self._check_finite(h, "decoder", i)
        return self.head(self.head_norm(h, cond))


def _to_tensor(a, dtype, device):
    return torch.as_tensor(np.asarray(a), dtype=dtype, device=device)


def _maybe_vis(seq: TokenSequence, dtype, device):
    if np.unique(seq.sample_id).size <= 1:
        return None
    return torch.as_tensor(visibility_mask(seq), device=device).unsqueeze(0)


def encode(model: FlowAutoencoder, seq: TokenSequence) -> LatentSequence:
    """Encode an interleaved token sequence (dropout zeros applied).

    Coordinates must be present for every token, dropped channels
    included; only the signal values are zeroed by dropout.
    """
    if seq.tokens.shape[0] != seq.coords.shape[0]:
        raise ModelError("token/coordinate length mismatch")
    p = next(model.parameters())
    tokens = _to_tensor(seq.tokens, p.dtype, p.device).unsqueeze(0)
    coords = _to_tensor(seq.coords, torch.long, p.device).unsqueeze(0)
    is_reg = _to_tensor(seq.is_register, torch.bool, p.device)
    with torch.no_grad():
        h = model.encode_tokens(tokens, coords, is_reg, _maybe_vis(seq, p.dtype, p.device))
    return LatentSequence(
        h.squeeze(0).cpu().numpy().astype(np.float64),
        seq.coords.copy(),
        seq.is_register.copy(),
    )


def decode(
    model: FlowAutoencoder, seq: TokenSequence, t: float, latent: LatentSequence
) -> np.ndarray:
    """Predict per-window velocities for noised tokens at flow time t."""
    if not 0.0 <= t <= 1.0:
        raise ModelError(f"flow time must lie in [0, 1], got {t}")
    if latent.n_data_tokens != len(seq):
        raise ModelError(
            f"latent has {latent.n_data_tokens} data tokens but decoder "
            f"input has {len(seq)}"
        )
    p = next(model.parameters())
    xt = _to_tensor(seq.tokens, p.dtype, p.device).unsqueeze(0)
    coords = _to_tensor(seq.coords, torch.long, p.device).unsqueeze(0)
    lat = _to_tensor(latent.vectors, p.dtype, p.device).unsqueeze(0)
    lat_reg = _to_tensor(latent.is_register, torch.bool, p.device)
    tt = torch.full((1,), float(t), dtype=p.dtype, device=p.device)
    with torch.no_grad():
        v = model.decode_tokens(
            xt, tt, lat, coords, lat_reg, _maybe_vis(seq, p.dtype, p.device)
        )
    return v.squeeze(0).cpu().numpy().astype(np.float64)


def param_store(model: FlowAutoencoder) -> ParamStore:
    tensors = {
        name: p.detach().cpu().numpy().astype(np.float64)
        for name, p in model.named_parameters()
    }
    return ParamStore(tensors, model.seed)


def save_checkpoint(
    path,
    model: FlowAutoencoder,
    step: int = 0,
    loss_history: list[float] | None = None,
):
    """Write a single-archive checkpoint: JSON manifest plus one raw
    float32 little-endian blob per named parameter tensor."""
    store = param_store(model)
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "config": asdict(model.cfg),
        "seed": store.seed,
        "step": int(step),
        "loss_history": list(loss_history or []),
        "tensors": {name: list(t.shape) for name, t in store.tensors.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for name, t in store.tensors.items():
            zf.writestr(f"params/{name}.bin", t.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[FlowAutoencoder, dict]:
    """Rebuild a model from a checkpoint archive; returns (model, manifest)."""
    try:
        archive = zipfile.ZipFile(path, "r")
    except zipfile.BadZipFile as err:
        raise ModelError(f"not a checkpoint archive: {path}") from err
    with archive as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as err:
            raise ModelError(f"checkpoint missing manifest: {path}") from err
        if manifest.get("format") != CHECKPOINT_MAGIC or manifest.get("version") != 1:
            raise ModelError(f"unrecognized checkpoint format in {path}")
        raw = manifest["config"]
        raw["rope_base"] = tuple(raw["rope_base"])
        cfg = ModelConfig(**raw)
        model = FlowAutoencoder(cfg, seed=manifest["seed"])
        state = {}
        for name, shape in manifest["tensors"].items():
            buf = zf.read(f"params/{name}.bin")
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            state[name] = torch.from_numpy(arr)
        missing = set(dict(model.named_parameters())) - set(state)
        if missing:
            raise ModelError(f"checkpoint missing tensors: {sorted(missing)}")
        model.load_state_dict(state)
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise ModelError("checkpoint contains non-finite parameters")
    return model, manifest
