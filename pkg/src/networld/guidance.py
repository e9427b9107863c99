"""Return classifier on noisy segments and the guidance gradient it provides."""

from __future__ import annotations

import logging
from typing import Sequence

import torch
from torch import nn

from networld.codec import RETURN_RANGE, BinGrid, soft_cross_entropy
from networld.nn import check_shape, dense
from networld.worldmodel import MAX_TASKS, Conditioning, DownPath, _as_index, _pad_time

log = logging.getLogger(__name__)


def return_grid(bins: int = 65) -> BinGrid:
    return BinGrid(*RETURN_RANGE, count=bins)


class ReturnClassifier(nn.Module):
    """U-Net down path, mean-pool over time, linear head over return bins."""

    def __init__(self, channels: int, grid: BinGrid | None = None, hidden: Sequence[int] = (32, 64, 64, 64),
                 kernel: int = 5, time_dim: int = 32, task_dim: int = 16, max_tasks: int = MAX_TASKS):
        super().__init__()
        self.channels = channels
        self.grid = grid if grid is not None else return_grid()
        self.cond = Conditioning(time_dim, task_dim, max_tasks)
        self.down = DownPath(channels, hidden, self.cond.dim, kernel)
        self.head = dense(hidden[-1], self.grid.count)
        self.nonfinite = 0

    def forward(self, x: torch.Tensor, t, task) -> torch.Tensor:
        check_shape(x, (None, None, self.channels), "classifier input")
        b = x.shape[0]
        emb = self.cond(_as_index(t, b), _as_index(task, b))
        h, _ = _pad_time(x)
        h, _ = self.down(h, emb)
        return self.head(h.mean(-1))


def predict_return(cls: ReturnClassifier, x_t: torch.Tensor, t, task_id) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits over return bins and the decoded expected return per segment."""
    logits = cls(x_t, t, task_id)
    return logits, cls.grid.decode_torch(torch.softmax(logits, dim=-1))


def classifier_loss(cls: ReturnClassifier, x_t: torch.Tensor, t, task_id, returns) -> torch.Tensor:
    target = torch.as_tensor(cls.grid.encode(torch.as_tensor(returns).detach().cpu().numpy()), dtype=x_t.dtype)
    return soft_cross_entropy(cls(x_t, t, task_id), target).mean()


def guidance_grad(cls: ReturnClassifier, x_t: torch.Tensor, t, task_id) -> torch.Tensor:
    """d(expected return)/d(x_t), with the clamped first row zeroed."""
    x = x_t.detach().requires_grad_(True)
    with torch.enable_grad():
        _, expected = predict_return(cls, x, t, task_id)
        (grad,) = torch.autograd.grad(expected.sum(), x)
    grad = grad.clone()
    grad[:, 0] = 0.0
    if not torch.isfinite(grad).all():
        cls.nonfinite += 1
        log.warning("non-finite guidance gradient at t=%s; using zero", t)
        return torch.zeros_like(grad)
    return grad
