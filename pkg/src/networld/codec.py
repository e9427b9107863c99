"""Scale-absorbing transforms shared by every task.

symlog/symexp compress observation scales, two-hot codes over symlog-uniform
bins represent actions and returns, the scenario encoder maps each task's
observations into one latent space, and ``mf_aggregate`` forms the mean-field
neighbour summary in that space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from networld.nn import MLP, check_shape

log = logging.getLogger(__name__)

DEFAULT_LATENT_DIM = 8
DEFAULT_BINS = 65
RETURN_RANGE = (-300.0, 300.0)


def symlog(x):
    """sign(x) * log(1 + |x|); accepts floats, numpy arrays and tensors."""
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.log1p(torch.abs(x))
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    """Inverse of :func:`symlog`."""
    if isinstance(y, torch.Tensor):
        return torch.sign(y) * torch.expm1(torch.abs(y))
    return np.sign(y) * np.expm1(np.abs(y))


@dataclass
class BinGrid:
    """``count`` bins spaced uniformly in symlog space over ``[low, high]``."""

    low: float
    high: float
    count: int = DEFAULT_BINS
    decode_mode: str = "symlog"  # or "raw": average raw symexp centres
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"bin grid needs at least 2 bins, got {self.count}")
        if not self.low < self.high:
            raise ValueError(f"bin grid range must satisfy low < high, got [{self.low}, {self.high}]")
        if self.decode_mode not in ("symlog", "raw"):
            raise ValueError(f"unknown decode mode {self.decode_mode!r}")
        lo, hi = symlog(float(self.low)), symlog(float(self.high))
        k = np.arange(self.count, dtype=np.float64)
        self.positions = lo + k * (hi - lo) / (self.count - 1)
        self.positions[-1] = hi
        self.centers = symexp(self.positions)
        # exact endpoints despite symexp(symlog(x)) rounding
        self.centers[0], self.centers[-1] = float(self.low), float(self.high)

    @property
    def bin_width(self) -> float:
        """Spacing between positions in the symlog domain."""
        return float(self.positions[1] - self.positions[0])

    def encode(self, v) -> np.ndarray:
        """Two-hot weights, shape ``v.shape + (count,)``."""
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("two-hot encode of a non-finite value")
        out_of_range = (v < self.low) | (v > self.high)
        if out_of_range.any():
            self.clamped += int(out_of_range.sum())
        s = symlog(np.clip(v, self.low, self.high))
        l = self.positions
        k = np.clip(np.searchsorted(l, s, side="right") - 1, 0, self.count - 2)
        hi_w = (s - l[k]) / (l[k + 1] - l[k])
        hi_w = np.clip(hi_w, 0.0, 1.0)
        hi_w = np.where(hi_w < 1e-12, 0.0, np.where(hi_w > 1 - 1e-12, 1.0, hi_w))
        w = np.zeros(v.shape + (self.count,))
        np.put_along_axis(w, k[..., None], (1.0 - hi_w)[..., None], axis=-1)
        np.put_along_axis(w, k[..., None] + 1, hi_w[..., None], axis=-1)
        return w

    def decode(self, weights) -> np.ndarray | float:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape[-1] != self.count:
            raise ValueError(f"expected {self.count} weights, got {w.shape[-1]}")
        if np.any(w < 0):
            raise ValueError("two-hot weights must be nonnegative")
        total = w.sum(axis=-1)
        if np.any(total <= 0):
            raise ValueError("cannot decode an all-zero weight vector")
        if self.decode_mode == "raw":
            out = (w @ self.centers) / total
        else:
            out = symexp((w @ self.positions) / total)
        return float(out) if np.ndim(out) == 0 else out

    # torch paths used inside losses and guidance

    def encode_torch(self, v: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.encode(v.detach().cpu().numpy()), dtype=v.dtype)

    def decode_torch(self, probs: torch.Tensor) -> torch.Tensor:
        """Differentiable decode of probability vectors over the last axis."""
        if self.decode_mode == "raw":
            return probs @ torch.as_tensor(self.centers, dtype=probs.dtype)
        return symexp(probs @ torch.as_tensor(self.positions, dtype=probs.dtype))


def twohot_encode(v: float, grid: BinGrid) -> np.ndarray:
    return grid.encode(v)


def twohot_decode(weights, grid: BinGrid) -> float:
    return grid.decode(weights)


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against soft targets, summed over the last axis."""
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1)


class ScenarioEncoder(nn.Module):
    """Per-task 3-layer MLP from symlog observations to the shared latent space.

    Each latent dimension is standardised with batch statistics (running
    estimates at eval time) so the diffusion objective cannot collapse the
    latents onto a single point. ``decoder`` maps latents back to symlog
    observations for the auxiliary reconstruction loss.
    """

    def __init__(self, obs_dim: int, latent_dim: int = DEFAULT_LATENT_DIM, hidden: int = 128,
                 normalize: bool = True):
        super().__init__()
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.normalize = normalize
        self.net = MLP([obs_dim, hidden, hidden, latent_dim])
        self.decoder = MLP([latent_dim, hidden, hidden, obs_dim])
        self.norm = nn.BatchNorm1d(latent_dim, affine=False) if normalize else None

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        check_shape(obs, (..., self.obs_dim), "observation")
        z = self.net(symlog(obs))
        if self.norm is not None:
            flat = z.reshape(-1, self.latent_dim)
            if self.training and flat.shape[0] < 2:
                raise ValueError("training-mode encoding needs at least two observations")
            z = self.norm(flat).reshape(z.shape)
        return z

    @torch.no_grad()
    def calibrate(self, obs) -> None:
        """Set the eval-time statistics to the exact moments over ``obs``.

        The running estimates trail an encoder that is still moving; planning
        needs latents scaled as the world model saw them at the end of training.
        """
        if self.norm is None:
            return
        obs = torch.as_tensor(obs, dtype=self.norm.running_mean.dtype).reshape(-1, self.obs_dim)
        if obs.shape[0] < 2:
            raise ValueError("calibration needs at least two observations")
        z = self.net(symlog(obs))
        self.norm.running_mean.copy_(z.mean(0))
        self.norm.running_var.copy_(z.var(0, unbiased=False))

    def reconstruct(self, z: torch.Tensor) -> torch.Tensor:
        """Decoded observation in raw units."""
        return symexp(self.decoder(z))

    def reconstruction_loss(self, z: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
        return ((self.decoder(z) - symlog(obs)) ** 2).mean()


def encode_obs(encoder: ScenarioEncoder, obs) -> torch.Tensor:
    obs = torch.as_tensor(obs, dtype=next(encoder.parameters()).dtype)
    with torch.no_grad():
        return encoder(obs)


def mf_aggregate(latents) -> torch.Tensor:
    """Mean of 1-hop neighbour latents (shape ``[k, d]``); zeros when ``k == 0``."""
    latents = torch.as_tensor(latents)
    if latents.ndim != 2:
        raise ValueError(f"neighbour latents must be [k, d], got shape {tuple(latents.shape)}")
    if latents.shape[0] == 0:
        return torch.zeros(latents.shape[1], dtype=latents.dtype)
    return latents.mean(0)


def mf_masked(z_all: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched mean-field summary.

    ``z_all`` is ``[..., N, d]`` (all agents), ``mask`` is ``[..., N]`` with 1 for
    neighbours. Returns the masked mean ``[..., d]`` and the presence flag ``[..., 1]``.
    """
    mask = mask.to(z_all.dtype)
    count = mask.sum(-1, keepdim=True)
    mean = (z_all * mask[..., None]).sum(-2) / count.clamp(min=1.0)
    return mean, (count > 0).to(z_all.dtype)
