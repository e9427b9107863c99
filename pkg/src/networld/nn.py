"""Network building blocks, optimiser, gradient checking and checkpoint IO.

Autograd comes from torch; this module pins down the layer set the models use,
their initialisation, the optimiser policy (skip non-finite steps) and the
plain-text-manifest + float32 checkpoint format.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "networld-checkpoint 1"


def check_shape(x: torch.Tensor, shape: Sequence, name: str = "input") -> None:
    """Validate ``x`` against ``shape``; ``...`` matches any leading dims, ``None`` any size."""
    dims = list(shape)
    actual = tuple(x.shape)
    if dims and dims[0] is Ellipsis:
        tail = dims[1:]
        if len(actual) < len(tail):
            raise ValueError(f"{name}: expected at least {len(tail)} dims ending in {tuple(tail)}, got {actual}")
        actual_tail = actual[len(actual) - len(tail):] if tail else ()
    else:
        tail = dims
        if len(actual) != len(tail):
            raise ValueError(f"{name}: expected shape {tuple(shape)}, got {actual}")
        actual_tail = actual
    for want, got in zip(tail, actual_tail):
        if want is not None and want != got:
            raise ValueError(f"{name}: expected shape {tuple(shape)}, got {actual}")


def dense(n_in: int, n_out: int, zero: bool = False) -> nn.Linear:
    """Fan-in scaled uniform dense layer (zero weights and bias if ``zero``)."""
    layer = nn.Linear(n_in, n_out)
    if zero:
        nn.init.zeros_(layer.weight)
        nn.init.zeros_(layer.bias)
    return layer


def conv1d(c_in: int, c_out: int, kernel: int, zero: bool = False, **kw) -> nn.Conv1d:
    layer = nn.Conv1d(c_in, c_out, kernel, **kw)
    if zero:
        nn.init.zeros_(layer.weight)
        nn.init.zeros_(layer.bias)
    return layer


class MLP(nn.Module):
    """Dense layers with SiLU between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], zero_last: bool = False):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = tuple(sizes)
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(dense(a, b, zero=zero_last and last))
            if not last:
                layers.append(nn.SiLU())
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_shape(x, (..., self.sizes[0]), "MLP input")
        return self.layers(x)


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError("sinusoidal embedding dim must be even")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
        args = t.to(torch.float64)[:, None] * freqs[None]
        emb = torch.cat([args.sin(), args.cos()], dim=-1)
        return emb.to(torch.get_default_dtype() if not t.is_floating_point() else t.dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------- optimiser


class Adam:
    """Adam over parameter groups; steps with any non-finite gradient are skipped.

    ``groups`` is a list of ``(params, lr)`` pairs so fine-tuning can run some
    modules at a reduced rate.
    """

    def __init__(self, groups, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if isinstance(groups, nn.Module) or (groups and isinstance(next(iter(groups)), torch.Tensor)):
            groups = [(groups.parameters() if isinstance(groups, nn.Module) else groups, lr)]
        param_groups = [{"params": list(p), "lr": g_lr} for p, g_lr in groups]
        param_groups = [g for g in param_groups if g["params"]]
        self.opt = torch.optim.Adam(param_groups, lr=lr, betas=betas, eps=eps)
        self.steps = 0
        self.skipped = 0

    @property
    def params(self) -> list[torch.Tensor]:
        return [p for g in self.opt.param_groups for p in g["params"]]

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def grads_finite(self) -> bool:
        return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in self.params)

    def step(self) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite grads."""
        if not self.grads_finite():
            self.skipped += 1
            log.warning("skipping optimiser step with non-finite gradient (%d skipped)", self.skipped)
            return False
        self.opt.step()
        self.steps += 1
        return True


# ---------------------------------------------------------------- grad check


def grad_check(
    net: nn.Module,
    loss: Callable[[nn.Module, torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-6,
    probes: int | None = 6,
    seed: int = 0,
    resolution: float = 1e-4,
) -> float:
    """Max relative error between autograd and central differences.

    Runs in double precision on a copy of ``net``. ``probes`` entries per
    parameter tensor are sampled (all entries when ``None``). Relative error is
    ``|a - c| / max(|a| + |c|, floor)``. The floor is the gradient size at
    which the round-off of the central difference (``10 * machine_eps * |loss|
    / eps``) alone would reach ``resolution``; below it a relative error cannot
    be measured, e.g. for a bias feeding a normalisation layer, whose gradient
    is exactly zero.
    """
    if eps <= 0 or resolution <= 0:
        raise ValueError("eps and resolution must be positive")
    import copy

    net = copy.deepcopy(net).double()
    x = x.double()
    net.zero_grad(set_to_none=True)
    value = loss(net, x)
    if value.numel() != 1:
        raise ValueError("grad_check loss must be scalar")
    if not torch.isfinite(value):
        raise ValueError(f"grad_check loss is not finite: {value.item()}")
    value.backward()
    floor = 10 * np.finfo(np.float64).eps * max(abs(value.item()), 1.0) / eps / resolution
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in net.named_parameters():
            grad = torch.zeros_like(p) if p.grad is None else p.grad
            flat, gflat = p.view(-1), grad.reshape(-1)
            n = flat.numel()
            idx = range(n) if probes is None or n <= probes else rng.choice(n, probes, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss(net, x).item()
                flat[i] = orig - eps
                down = loss(net, x).item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = gflat[i].item()
                err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
                if err > worst:
                    log.debug("grad_check %s[%d]: analytic %.3e numeric %.3e", name, i, analytic, numeric)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor] | nn.Module) -> None:
    """Write ``name shape offset`` manifest lines, a blank line, then float32 LE payload."""
    if isinstance(tensors, nn.Module):
        tensors = tensors.state_dict()
    lines = [CHECKPOINT_MAGIC, str(len(tensors))]
    chunks = []
    offset = 0
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"checkpoint tensor names cannot contain whitespace: {name!r}")
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"{name} {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.size
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    Path(path).write_bytes(header + b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: checkpoint header is not terminated")
    lines = raw[:sep].decode("ascii").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a networld checkpoint (header {lines[0]!r})")
    try:
        count = int(lines[1])
    except (IndexError, ValueError):
        raise ValueError(f"{path}: corrupted checkpoint manifest") from None
    if len(lines) != count + 2:
        raise ValueError(f"{path}: manifest lists {len(lines) - 2} tensors, header says {count}")
    payload = np.frombuffer(raw[sep + 2:], dtype="<f4")
    out = {}
    for line in lines[2:]:
        try:
            name, shape_s, off_s = line.split(" ")
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            off = int(off_s)
        except ValueError:
            raise ValueError(f"{path}: malformed manifest line {line!r}") from None
        size = int(np.prod(shape)) if shape else 1
        if off + size > payload.size:
            raise ValueError(f"{path}: payload truncated (tensor {name} needs {off + size} floats, have {payload.size})")
        out[name] = torch.from_numpy(payload[off:off + size].reshape(shape).copy())
    return out


def load_into(module: nn.Module, path: str | Path) -> None:
    state = load_checkpoint(path)
    own = module.state_dict()
    missing = set(own) - set(state)
    if missing:
        raise ValueError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items() if k in own})


def parameters_of(modules: Iterable[nn.Module]) -> list[torch.Tensor]:
    return [p for m in modules for p in m.parameters()]
