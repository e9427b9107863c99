"""DDPM over latent observation segments.

A segment is ``[B, H, C]``: per-step local latent (``d`` channels), mean-field
latent (``d`` channels) and a neighbour-presence flag. The noise predictor is a
temporal U-Net conditioned on the diffusion step and the task index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from networld.nn import MLP, SinusoidalEmbedding, check_shape, conv1d, dense

log = logging.getLogger(__name__)

DEFAULT_STEPS = 100
DEFAULT_HORIZON = 16
MAX_TASKS = 16
LEVELS = 4


@dataclass
class NoiseSchedule:
    betas: np.ndarray  # betas[t - 1] for t = 1..T

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def steps(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step ``t``; 1 at ``t = 0``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_text(self) -> str:
        return f"diffusion_steps = {self.steps}\nbeta_start = {self.betas[0]!r}\nbeta_end = {self.betas[-1]!r}\n"


def default_beta_range(steps: int) -> tuple[float, float]:
    """DDPM's 1e-4..2e-2 linear range rescaled to ``steps`` (1000/steps)."""
    scale = 1000.0 / steps
    return 1e-4 * scale, min(2e-2 * scale, 0.999)


def make_schedule(steps: int = DEFAULT_STEPS, beta_start: float | None = None,
                  beta_end: float | None = None) -> NoiseSchedule:
    if beta_start is None or beta_end is None:
        beta_start, beta_end = default_beta_range(steps)
    if steps < 1:
        raise ValueError("schedule needs at least one step")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, steps))


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    return torch.as_tensor(values, dtype=like.dtype)[t - 1].view(-1, *([1] * (like.ndim - 1)))


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; ``t`` int or ``[B]`` tensor in 1..T."""
    abar = _gather(schedule.alpha_bars, t, x0)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * noise


def predict_x0(schedule: NoiseSchedule, x_t: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    abar = _gather(schedule.alpha_bars, t, x_t)
    return (x_t - (1 - abar).sqrt() * eps) / abar.sqrt()


# ---------------------------------------------------------------- network


class ResidualTemporalBlock(nn.Module):
    """conv-GN-SiLU (+ conditioning) then conv-GN-SiLU, with a residual path."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, kernel: int = 5, groups: int = 8):
        super().__init__()
        self.conv1 = conv1d(c_in, c_out, kernel, padding=kernel // 2)
        self.norm1 = nn.GroupNorm(groups, c_out)
        self.cond = dense(emb_dim, c_out)
        self.conv2 = conv1d(c_out, c_out, kernel, padding=kernel // 2)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.skip = conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.norm1(self.conv1(x)) + self.cond(F.silu(emb))[:, :, None]
        h = F.silu(h)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Conditioning(nn.Module):
    """Diffusion-step embedding concatenated with a learned task embedding."""

    def __init__(self, time_dim: int = 32, task_dim: int = 16, max_tasks: int = MAX_TASKS):
        super().__init__()
        self.time_embed = SinusoidalEmbedding(time_dim)
        self.time_mlp = MLP([time_dim, 2 * time_dim, time_dim])
        self.task_embed = nn.Embedding(max_tasks, task_dim)
        self.dim = time_dim + task_dim
        self.max_tasks = max_tasks

    def forward(self, t: torch.Tensor, task: torch.Tensor) -> torch.Tensor:
        if torch.any(task < 0) or torch.any(task >= self.max_tasks):
            raise ValueError(f"task index out of range [0, {self.max_tasks})")
        dtype = self.task_embed.weight.dtype
        te = self.time_mlp(self.time_embed(t).to(dtype))
        return torch.cat([te, self.task_embed(task)], dim=-1)


def _as_index(v, batch: int) -> torch.Tensor:
    return torch.as_tensor(v, dtype=torch.long).reshape(-1).expand(batch)


class DownPath(nn.Module):
    """Residual block + stride-2 convolution, repeated ``LEVELS`` times."""

    def __init__(self, channels: int, hidden: Sequence[int], emb_dim: int, kernel: int = 5):
        super().__init__()
        if len(hidden) != LEVELS:
            raise ValueError(f"need {LEVELS} hidden widths, got {len(hidden)}")
        dims = [channels, *hidden]
        self.blocks = nn.ModuleList(ResidualTemporalBlock(a, b, emb_dim, kernel) for a, b in zip(dims[:-1], dims[1:]))
        self.downs = nn.ModuleList(conv1d(c, c, 3, stride=2, padding=1) for c in hidden)

    def forward(self, x, emb):
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x, emb)
            skips.append(x)
            x = down(x)
        return x, skips


def padded_length(horizon: int) -> int:
    m = 2 ** LEVELS
    return -(-horizon // m) * m


def _pad_time(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    """[B, H, C] -> [B, C, H'] with H' a multiple of 2**LEVELS (edge replication)."""
    h = x.shape[1]
    x = x.transpose(1, 2)
    extra = padded_length(h) - h
    if extra:
        x = F.pad(x, (0, extra), mode="replicate")
    return x, h


class TemporalUNet(nn.Module):
    """Noise predictor: 4 down-sampling and 4 up-sampling residual blocks over time."""

    def __init__(self, channels: int, hidden: Sequence[int] = (32, 64, 64, 64), kernel: int = 5,
                 time_dim: int = 32, task_dim: int = 16, max_tasks: int = MAX_TASKS):
        super().__init__()
        self.channels = channels
        self.hidden = tuple(hidden)
        self.cond = Conditioning(time_dim, task_dim, max_tasks)
        self.down = DownPath(channels, hidden, self.cond.dim, kernel)
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(LEVELS)):
            out = hidden[i - 1] if i > 0 else hidden[0]
            self.ups.append(nn.ConvTranspose1d(hidden[i], hidden[i], 4, stride=2, padding=1))
            self.up_blocks.append(ResidualTemporalBlock(2 * hidden[i], out, self.cond.dim, kernel))
        # zero output: an untrained model predicts zero noise
        self.out = conv1d(hidden[0], channels, 1, zero=True)

    def forward(self, x: torch.Tensor, t, task) -> torch.Tensor:
        check_shape(x, (None, None, self.channels), "noise model input")
        b = x.shape[0]
        emb = self.cond(_as_index(t, b), _as_index(task, b))
        h, length = _pad_time(x)
        h, skips = self.down(h, emb)
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips)):
            h = block(torch.cat([up(h), skip], dim=1), emb)
        return self.out(h)[:, :, :length].transpose(1, 2)


# ---------------------------------------------------------------- training / sampling


def noised(schedule: NoiseSchedule, x0: torch.Tensor, gen: torch.Generator | None = None):
    """Draw t ~ U{1..T} per row and noise; returns (x_t, t, noise)."""
    b = x0.shape[0]
    t = torch.randint(1, schedule.steps + 1, (b,), generator=gen)
    noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return q_sample(schedule, x0, t, noise), t, noise


def clamp_first(x_t: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Replace row 0 of a noised segment with the clean row, as sampling does."""
    x_t = x_t.clone()
    x_t[:, 0] = x0[:, 0]
    return x_t


def eps_error(eps: torch.Tensor, noise: torch.Tensor, clamped: bool) -> torch.Tensor:
    """Per-segment squared error; a clamped row 0 carries no noise to predict."""
    if clamped and eps.shape[1] > 1:
        eps, noise = eps[:, 1:], noise[:, 1:]
    return ((eps - noise) ** 2).mean(dim=(1, 2))


def diffusion_loss(model: TemporalUNet, schedule: NoiseSchedule, x0: torch.Tensor, task_id,
                   gen: torch.Generator | None = None, clamp: bool = False) -> torch.Tensor:
    x_t, t, noise = noised(schedule, x0, gen)
    if clamp:
        x_t = clamp_first(x_t, x0)
    return eps_error(model(x_t, t, task_id), noise, clamp).mean()


def draw_noise(shape, rng, dtype=torch.float32) -> torch.Tensor:
    """Gaussian noise from one generator, or one generator per batch row."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError(f"need one generator per row: {len(rng)} for batch {shape[0]}")
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in rng])
    return torch.randn(shape, generator=rng, dtype=dtype)


@torch.no_grad()
def p_sample_step(model: TemporalUNet, schedule: NoiseSchedule, x_t: torch.Tensor, t: int, task_id,
                  guidance_grad: torch.Tensor | None = None, scale: float = 0.0, rng=None) -> torch.Tensor:
    """One reverse step: posterior mean + scale * sigma_t^2 * grad + sigma_t * z (z = 0 at t = 1)."""
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"t must be in [1, {schedule.steps}], got {t}")
    beta, abar = schedule.beta(t), schedule.alpha_bar(t)
    eps = model(x_t, t, task_id)
    mean = (x_t - (beta / np.sqrt(1 - abar)) * eps) / np.sqrt(1 - beta)
    if scale and guidance_grad is not None:
        mean = mean + (scale * beta) * guidance_grad
    if t > 1:
        mean = mean + np.sqrt(beta) * draw_noise(x_t.shape, rng, x_t.dtype)
    return mean


GuidanceFn = Callable[[torch.Tensor, int], torch.Tensor]


@torch.no_grad()
def sample_segment(model: TemporalUNet, schedule: NoiseSchedule, z_cond: torch.Tensor, task_id,
                   horizon: int = DEFAULT_HORIZON, guidance: GuidanceFn | None = None,
                   scale: float = 0.0, rng=None) -> torch.Tensor:
    """Sample ``[B, H, C]`` segments whose first row is clamped to ``z_cond`` ``[B, C]``."""
    check_shape(z_cond, (None, model.channels), "segment condition")
    b = z_cond.shape[0]
    x = draw_noise((b, horizon, model.channels), rng, z_cond.dtype)
    for t in range(schedule.steps, 0, -1):
        x[:, 0] = z_cond
        grad = None
        if scale and guidance is not None:
            with torch.enable_grad():
                grad = guidance(x, t)
        x = p_sample_step(model, schedule, x, t, task_id, grad, scale, rng)
    x[:, 0] = z_cond
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).flatten(1).any(1).nonzero().flatten().tolist()
        raise FloatingPointError(f"non-finite sample in rows {bad}")
    return x
