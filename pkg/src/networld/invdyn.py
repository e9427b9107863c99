"""Per-task inverse dynamics: latent transition -> action, via two-hot heads."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from networld.codec import DEFAULT_BINS, BinGrid, soft_cross_entropy
from networld.envs import DISCRETE, TaskSpec
from networld.nn import MLP, check_shape


class InverseDynamics(nn.Module):
    def __init__(self, latent_dim: int, grids: list[BinGrid], discrete: bool = False, hidden: int = 256):
        super().__init__()
        self.latent_dim = latent_dim
        self.grids = grids
        self.discrete = discrete
        self.bins = grids[0].count
        if any(g.count != self.bins for g in grids):
            raise ValueError("all action grids must have the same bin count")
        self.net = MLP([2 * latent_dim, hidden, hidden, len(grids) * self.bins])

    @classmethod
    def for_task(cls, spec: TaskSpec, latent_dim: int, bins: int = DEFAULT_BINS, hidden: int = 256):
        grids = [BinGrid(lo, hi, bins) for lo, hi in zip(spec.action_low, spec.action_high)]
        return cls(latent_dim, grids, spec.action_kind == DISCRETE, hidden)

    @property
    def action_dim(self) -> int:
        return len(self.grids)

    def forward(self, z: torch.Tensor, z_next: torch.Tensor) -> torch.Tensor:
        """Logits ``[..., action_dim, bins]``."""
        check_shape(z, (..., self.latent_dim), "latent")
        check_shape(z_next, (..., self.latent_dim), "next latent")
        out = self.net(torch.cat([z, z_next], dim=-1))
        return out.reshape(*out.shape[:-1], self.action_dim, self.bins)

    def decode(self, logits: torch.Tensor) -> np.ndarray:
        probs = torch.softmax(logits.double(), dim=-1).detach().cpu().numpy()
        action = np.stack([g.decode(probs[..., k, :]) for k, g in enumerate(self.grids)], axis=-1)
        lo = np.array([g.low for g in self.grids])
        hi = np.array([g.high for g in self.grids])
        action = np.clip(action, lo, hi)
        if self.discrete:
            action = np.clip(np.rint(action), np.ceil(lo), np.floor(hi))
        return action


@torch.no_grad()
def infer_action(idm: InverseDynamics, z: torch.Tensor, z_next: torch.Tensor) -> np.ndarray:
    return idm.decode(idm(z, z_next))


def action_targets(idm: InverseDynamics, actions) -> torch.Tensor:
    a = np.asarray(actions.detach().cpu().numpy() if isinstance(actions, torch.Tensor) else actions, dtype=np.float64)
    return torch.as_tensor(np.stack([g.encode(a[..., k]) for k, g in enumerate(idm.grids)], axis=-2))


def invdyn_loss(idm: InverseDynamics, z: torch.Tensor, z_next: torch.Tensor, true_action) -> torch.Tensor:
    """Sum over action dimensions of soft cross-entropy, averaged over transitions."""
    logits = idm(z, z_next)
    target = action_targets(idm, true_action).to(logits.dtype)
    return soft_cross_entropy(logits, target).sum(-1).mean()
