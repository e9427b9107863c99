"""Model container, multi-task pretraining and few-shot fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from networld.codec import DEFAULT_BINS, DEFAULT_LATENT_DIM, ScenarioEncoder, mf_masked, soft_cross_entropy, symlog
from networld.dataset import SegmentBatch, TrajectoryStore, sample_batch
from networld.envs import TaskSpec, parse_kv
from networld.guidance import ReturnClassifier, return_grid
from networld.invdyn import InverseDynamics, action_targets
from networld.nn import Adam, load_into, save_checkpoint
from networld.worldmodel import (DEFAULT_HORIZON, DEFAULT_STEPS, TemporalUNet, clamp_first, eps_error,
                                make_schedule, noised, q_sample)

log = logging.getLogger(__name__)

COMPONENTS = ("diffusion", "classifier", "invdyn", "reconstruction")


def _kv_lines(obj) -> list[str]:
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        out.append(f"{f.name} = {v}")
    return out


def _from_kv(cls, kv: dict[str, str]):
    """Build a config dataclass from string values, using field defaults for types."""
    kwargs = {}
    for f in fields(cls):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        default = f.default if f.default is not f.default_factory else f.default_factory()  # type: ignore[misc]
        if isinstance(default, bool):
            kwargs[f.name] = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        elif isinstance(default, tuple):
            items = [x for x in raw.split(",") if x]
            kwargs[f.name] = tuple(type(default[0])(x) if default else x for x in items)
        elif default is None:
            kwargs[f.name] = None if raw in ("", "None") else raw
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


@dataclass
class ModelConfig:
    latent_dim: int = DEFAULT_LATENT_DIM
    bins: int = DEFAULT_BINS
    return_bins: int = DEFAULT_BINS
    horizon: int = DEFAULT_HORIZON
    diffusion_steps: int = DEFAULT_STEPS
    hidden: tuple[int, ...] = (32, 64, 64, 64)  # first level must be at least the 2d+1 input channels
    encoder_hidden: int = 128
    invdyn_hidden: int = 256

    @property
    def channels(self) -> int:
        # local latent, mean-field latent, neighbour-presence flag
        return 2 * self.latent_dim + 1


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    finetune_ratio: float = 0.1
    w_diffusion: float = 1.0
    w_classifier: float = 1.0
    w_invdyn: float = 1.0
    w_reconstruction: float = 0.1
    seed: int = 0
    gamma: float = 0.99

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be positive")
        if min(self.w_diffusion, self.w_classifier, self.w_invdyn, self.w_reconstruction) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr < 0 or self.finetune_ratio < 0:
            raise ValueError("learning rates must be nonnegative")

    @property
    def weights(self) -> dict[str, float]:
        return dict(diffusion=self.w_diffusion, classifier=self.w_classifier,
                    invdyn=self.w_invdyn, reconstruction=self.w_reconstruction)

    def to_text(self) -> str:
        return "\n".join(_kv_lines(self)) + "\n"


class NetWorld(nn.Module):
    """Shared noise model and classifier plus per-task encoders and inverse dynamics."""

    def __init__(self, cfg: ModelConfig, specs: Sequence[TaskSpec] = ()):
        super().__init__()
        self.cfg = cfg
        self.schedule = make_schedule(cfg.diffusion_steps)
        self.noise_model = TemporalUNet(cfg.channels, cfg.hidden)
        self.classifier = ReturnClassifier(cfg.channels, return_grid(cfg.return_bins), cfg.hidden)
        self.encoders = nn.ModuleDict()
        self.invdyn = nn.ModuleDict()
        self.specs: dict[int, TaskSpec] = {}
        for spec in specs:
            self._add_modules(spec)

    def _add_modules(self, spec: TaskSpec) -> None:
        key = str(spec.task_id)
        self.specs[spec.task_id] = spec
        self.encoders[key] = ScenarioEncoder(spec.obs_dim, self.cfg.latent_dim, self.cfg.encoder_hidden)
        self.invdyn[key] = InverseDynamics.for_task(spec, self.cfg.latent_dim, self.cfg.bins, self.cfg.invdyn_hidden)

    def add_task(self, spec: TaskSpec) -> None:
        """Fresh encoder, inverse dynamics and task-embedding rows for ``spec``."""
        self._add_modules(spec)
        with torch.no_grad():
            for cond in (self.noise_model.cond, self.classifier.cond):
                nn.init.normal_(cond.task_embed.weight[spec.task_id])

    def encoder(self, task_id: int) -> ScenarioEncoder:
        return self.encoders[str(task_id)]

    def idm(self, task_id: int) -> InverseDynamics:
        return self.invdyn[str(task_id)]

    def task_modules(self, task_id: int) -> list[nn.Module]:
        return [self.encoder(task_id), self.idm(task_id)]

    def latent_segment(self, task_id: int, obs_all: torch.Tensor, agent: torch.Tensor, mask: torch.Tensor):
        """Assemble ``[B, H, C]`` segments and the local latents ``[B, H, d]``.

        ``obs_all`` is ``[B, H, N, obs_dim]``, ``agent`` ``[B]``, ``mask`` ``[B, N]``.
        """
        z_all = self.encoder(task_id)(obs_all)
        b, h = z_all.shape[:2]
        z_local = z_all[torch.arange(b), :, agent]
        mf, flag = mf_masked(z_all, mask[:, None, :].expand(b, h, -1))
        return torch.cat([z_local, mf, flag], dim=-1), z_local

    def condition(self, task_id: int, obs: torch.Tensor, adjacency) -> tuple[torch.Tensor, torch.Tensor]:
        """Planning condition rows for every agent: obs ``[E, N, obs_dim]`` -> ``[E, N, C]``, latents ``[E, N, d]``."""
        z = self.encoder(task_id)(obs)
        adj = torch.as_tensor(np.asarray(adjacency), dtype=z.dtype)
        e, n, _ = z.shape
        mf, flag = mf_masked(z[:, None].expand(e, n, n, -1), adj[None].expand(e, n, n))
        return torch.cat([z, mf, flag], dim=-1), z

    # -- persistence

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "model.txt").write_text("\n".join(_kv_lines(self.cfg)) + f"\ntasks = {','.join(str(t) for t in self.specs)}\n")
        for tid, spec in self.specs.items():
            (path / f"task_{tid}.txt").write_text(spec.to_text())
        save_checkpoint(path / "weights.ckpt", self)

    @classmethod
    def load(cls, path: str | Path) -> "NetWorld":
        path = Path(path)
        if not (path / "model.txt").exists() or not (path / "weights.ckpt").exists():
            raise FileNotFoundError(f"{path}: no model checkpoint (model.txt / weights.ckpt)")
        kv = parse_kv((path / "model.txt").read_text())
        cfg = _from_kv(ModelConfig, kv)
        tids = [int(t) for t in kv.get("tasks", "").split(",") if t]
        specs = [TaskSpec.from_text((path / f"task_{t}.txt").read_text()) for t in tids]
        model = cls(cfg, specs)
        load_into(model, path / "weights.ckpt")
        return model


def build_models(cfg: ModelConfig, specs: Sequence[TaskSpec], seed: int = 0) -> NetWorld:
    torch.manual_seed(seed)
    return NetWorld(cfg, specs)


# ---------------------------------------------------------------- training step


def segment_losses(models: NetWorld, batch: SegmentBatch, gen: torch.Generator | None = None,
                   t: torch.Tensor | None = None, noise: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Per-segment loss components, shape ``[B]`` each."""
    tid = batch.task_id
    obs_all = torch.as_tensor(batch.obs_all, dtype=torch.float32)
    agent = torch.as_tensor(batch.agent, dtype=torch.long)
    x0, z_local = models.latent_segment(tid, obs_all, agent, torch.as_tensor(batch.mask))
    if t is None:
        x_t, t, noise = noised(models.schedule, x0, gen)
    else:
        x_t = q_sample(models.schedule, x0, t, noise)
    x_t = clamp_first(x_t, x0)  # train under the same conditioning the sampler applies
    eps = models.noise_model(x_t, t, tid)
    diff = eps_error(eps, noise, clamped=True)

    cls = models.classifier
    target = torch.as_tensor(cls.grid.encode(batch.returns), dtype=torch.float32)
    logits = cls(x_t.detach(), t, tid)
    cls_loss = soft_cross_entropy(logits, target)

    idm = models.idm(tid)
    zl = z_local.detach()
    inv = invdyn_loss_rows(idm, zl[:, :-1], zl[:, 1:], batch.actions[:, :-1])

    enc = models.encoder(tid)
    obs_local = obs_all[torch.arange(len(agent)), :, agent]
    rec = ((enc.decoder(z_local) - symlog(obs_local)) ** 2).mean(dim=(1, 2))
    return dict(diffusion=diff, classifier=cls_loss, invdyn=inv, reconstruction=rec)


def invdyn_loss_rows(idm: InverseDynamics, z, z_next, actions) -> torch.Tensor:
    """Inverse-dynamics loss per segment, averaged over its transitions."""
    logits = idm(z, z_next)
    target = action_targets(idm, actions).to(logits.dtype)
    return soft_cross_entropy(logits, target).sum(-1).mean(-1)


@dataclass
class StepResult:
    components: dict[str, float]
    total: float
    skipped: bool


def joint_step(models: NetWorld, optimizers: dict[str, Adam], batch: SegmentBatch, cfg: TrainConfig,
               gen: torch.Generator | None = None) -> StepResult:
    """One weighted joint update of diffusion, classifier, inverse-dynamics and reconstruction losses."""
    for opt in optimizers.values():
        opt.zero_grad()
    rows = segment_losses(models, batch, gen)
    losses = {k: v.mean() for k, v in rows.items()}
    w = cfg.weights
    total_t = sum(w[k] * losses[k] for k in COMPONENTS)
    components = {k: float(losses[k].item()) for k in COMPONENTS}
    total = 0.0
    for k in COMPONENTS:
        total += w[k] * components[k]
    if not math.isfinite(total):
        log.warning("non-finite total loss %.3g; skipping step", total)
        return StepResult(components, total, True)
    total_t.backward()
    skipped = False
    for opt in optimizers.values():
        skipped |= not opt.step()
    return StepResult(components, total, skipped)


# ---------------------------------------------------------------- loops


@dataclass
class RunArtifacts:
    records: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    summaries: dict = field(default_factory=dict)
    models: NetWorld | None = None

    def write_curves(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["step", "component", "value"])
            for r in self.records:
                for k in (*COMPONENTS, "total"):
                    wr.writerow([r["step"], k, repr(r[k])])

    def curve(self, component: str) -> np.ndarray:
        return np.array([r[component] for r in self.records])


def pretrain_optimizers(models: NetWorld, lr: float) -> dict[str, Adam]:
    opts = {"world": Adam(models.noise_model, lr), "classifier": Adam(models.classifier, lr)}
    for tid in models.specs:
        opts[f"encoder:{tid}"] = Adam(models.encoder(tid), lr)
        opts[f"invdyn:{tid}"] = Adam(models.idm(tid), lr)
    return opts


def finetune_optimizers(models: NetWorld, task_id: int, lr: float, ratio: float) -> dict[str, Adam]:
    """Fresh modules and task-embedding tables at ``lr``; the world model at ``lr * ratio``."""
    embeds = [models.noise_model.cond.task_embed.weight, models.classifier.cond.task_embed.weight]
    embed_ids = {id(p) for p in embeds}
    world = [p for p in models.noise_model.parameters() if id(p) not in embed_ids]
    cls = [p for p in models.classifier.parameters() if id(p) not in embed_ids]
    return {
        "world": Adam([(world, lr * ratio)]),
        "classifier": Adam([(cls, lr * ratio)]),
        "task_embedding": Adam([(embeds, lr)]),
        f"encoder:{task_id}": Adam(models.encoder(task_id), lr),
        f"invdyn:{task_id}": Adam(models.idm(task_id), lr),
    }


def _check_stores(stores: dict[int, TrajectoryStore], horizon: int) -> None:
    if not stores:
        raise ValueError("training needs at least one task dataset")
    for tid, store in stores.items():
        if not any(e.length >= horizon for e in store.episodes):
            raise ValueError(f"task {tid}: no episode reaches the horizon {horizon}")


def train(models: NetWorld, stores: dict[int, TrajectoryStore], cfg: TrainConfig,
          optimizers: dict[str, Adam], out_dir: str | Path | None = None) -> RunArtifacts:
    """``epochs * steps_per_epoch`` joint steps; the task for each batch is drawn uniformly."""
    horizon = models.cfg.horizon
    _check_stores(stores, horizon)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    tids = sorted(stores)
    models.train()
    art = RunArtifacts(models=models)
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            tid = tids[int(rng.integers(len(tids)))]
            store = stores[tid]
            store.gamma = cfg.gamma
            batch = sample_batch(store, horizon, cfg.batch_size, rng)
            res = joint_step(models, optimizers, batch, cfg, gen)
            art.records.append(dict(step=step, epoch=epoch, task=tid, **res.components, total=res.total,
                                    skipped=res.skipped))
            step += 1
        recent = art.records[-cfg.steps_per_epoch:]
        log.info("epoch %d: diffusion %.4f classifier %.4f invdyn %.4f", epoch,
                 np.mean([r["diffusion"] for r in recent]), np.mean([r["classifier"] for r in recent]),
                 np.mean([r["invdyn"] for r in recent]))
        for tid in tids:
            models.encoder(tid).calibrate(np.concatenate([e.obs for e in stores[tid].episodes]))
        if out_dir is not None:
            ckpt = Path(out_dir) / f"epoch_{epoch:03d}"
            models.save(ckpt)
            art.checkpoints.append(ckpt)
    return art


def pretrain(cfg: TrainConfig, stores: dict[int, TrajectoryStore], model_cfg: ModelConfig | None = None,
             out_dir: str | Path | None = None, models: NetWorld | None = None) -> RunArtifacts:
    if not stores:
        raise ValueError("pretraining needs at least one source task")
    specs = [s.spec for s in stores.values()]
    if any(s is None for s in specs):
        raise ValueError("every source dataset must carry its task spec")
    if models is None:
        models = build_models(model_cfg or ModelConfig(), specs, cfg.seed)
    _check_stores(stores, models.cfg.horizon)
    return train(models, stores, cfg, pretrain_optimizers(models, cfg.lr), out_dir)


def finetune(cfg: TrainConfig, pretrained: NetWorld | str | Path, store: TrajectoryStore,
             out_dir: str | Path | None = None) -> RunArtifacts:
    """Adapt to a held-out task: fresh encoder/inverse dynamics, world model at a reduced rate."""
    models = pretrained if isinstance(pretrained, NetWorld) else NetWorld.load(pretrained)
    spec = store.spec
    if spec is None:
        raise ValueError("fine-tuning dataset must carry its task spec")
    torch.manual_seed(cfg.seed)
    models.add_task(spec)
    _check_stores({spec.task_id: store}, models.cfg.horizon)
    opts = finetune_optimizers(models, spec.task_id, cfg.lr, cfg.finetune_ratio)
    return train(models, {spec.task_id: store}, cfg, opts, out_dir)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")


def config_text(train_cfg: TrainConfig | None = None, model_cfg: ModelConfig | None = None, **extra) -> str:
    lines = []
    if train_cfg is not None:
        lines += _kv_lines(train_cfg)
    if model_cfg is not None:
        lines += [f"model.{l}" for l in _kv_lines(model_cfg)]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"
