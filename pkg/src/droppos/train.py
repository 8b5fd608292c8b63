"""AdamW, warmup + cosine learning rate, and the DropPos pretraining loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .data import ImageDataset, batches
from .errors import ContractError, FormatError, TrainingDiverged
from .task import DropPosModel, SigmaSchedule, SmoothingCache, TaskConfig, forward_step, sigma_at
from .vit import ViTConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "acc", "lr", "sigma")
NO_DECAY_KEYS = ("norm", "cls_token", "p_mask")


@dataclass
class TrainConfig:
    base_lr: float = 4e-3
    batch_size: int = 64
    epochs: int = 20
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    augment: bool = False
    checkpoint_every: int = 0   # steps; 0 = once per epoch
    task: TaskConfig = field(default_factory=TaskConfig)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def zeros_like(cls, params: dict, **hyper) -> OptimizerState:
        m = {k: np.zeros_like(_arr(p)) for k, p in params.items()}
        v = {k: np.zeros_like(_arr(p)) for k, p in params.items()}
        return cls(m, v, **hyper)


def _arr(p):
    return p.data if isinstance(p, T.Tensor) else p


def decays(name: str) -> bool:
    """Weight decay skips layer norms, the [CLS] token and the [MASK] PE."""
    return not any(key in name for key in NO_DECAY_KEYS)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> OptimizerState:
    """One in-place AdamW update with bias correction and decoupled decay."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        data = _arr(p)
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape or state.m[name].shape != data.shape:
            raise ContractError(f"shape mismatch for {name}: param {data.shape}, grad {g.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name):
            update = update + state.weight_decay * data
        data -= (lr * update).astype(data.dtype, copy=False)
    return state


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, batch_size: int = 256) -> float:
    """Linear warmup to ``base_lr * batch_size / 256``, then half-cosine to 0."""
    peak = base_lr * batch_size / 256.0
    if step < warmup_steps:
        return peak * step / warmup_steps
    if step >= total_steps:
        return 0.0
    span = max(total_steps - warmup_steps, 1)
    return 0.5 * peak * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    optimizer: OptimizerState
    step: int
    config: dict
    version: int = ckpt_io.VERSION

    def to_arrays(self) -> dict:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"adam.m/{k}": v for k, v in self.optimizer.m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.optimizer.v.items()})
        opt = self.optimizer
        out["adam.step"] = np.array(opt.step, dtype=np.int64)
        out["adam.hyper"] = np.array([opt.beta1, opt.beta2, opt.eps, opt.weight_decay])
        out["schedule.step"] = np.array(self.step, dtype=np.int64)
        out["config"] = ckpt_io.pack_json(self.config)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> Checkpoint:
        try:
            params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
            m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m/")}
            v = {k[7:]: a for k, a in arrays.items() if k.startswith("adam.v/")}
            b1, b2, eps, wd = (float(x) for x in arrays["adam.hyper"])
            opt = OptimizerState(m, v, int(arrays["adam.step"]), b1, b2, eps, wd)
            return cls(params, opt, int(arrays["schedule.step"]), ckpt_io.unpack_json(arrays["config"]))
        except KeyError as exc:
            raise FormatError(f"checkpoint is missing record {exc}") from None


def save_checkpoint(path, ck: Checkpoint) -> None:
    ckpt_io.save_arrays(path, ck.to_arrays())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_arrays(ckpt_io.load_arrays(path))


def config_snapshot(train_cfg: TrainConfig, model_cfg: ViTConfig) -> dict:
    return {"train": dataclasses.asdict(train_cfg), "model": dataclasses.asdict(model_cfg)}


def model_from_checkpoint(ck: Checkpoint) -> DropPosModel:
    cfg = ViTConfig(**ck.config["model"])
    model = DropPosModel(cfg)
    model.load_state_dict(ck.params)
    return model


# -- pretraining loop ------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: DropPosModel
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)


def _read_metrics(path: Path, before_step: int) -> list:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["step"]) < before_step]


def _write_metrics(path: Path, rows: list) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r[k] for k in METRICS_HEADER])


def pretrain(config: TrainConfig, model_cfg: ViTConfig, dataset: ImageDataset, out_dir=None,
             resume=None, stop_after: int | None = None) -> PretrainResult:
    """Run DropPos pretraining.

    Writes ``checkpoint.dpos`` and ``metrics.csv`` into ``out_dir`` when given.
    ``resume`` is a checkpoint path or :class:`Checkpoint`; ``stop_after``
    halts (and checkpoints) once that many optimizer steps are done.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ck_path = out / "checkpoint.dpos" if out is not None else None
    metrics_path = out / "metrics.csv" if out is not None else None

    bs = config.batch_size
    spe = math.ceil(len(dataset) / bs)
    total = config.epochs * spe
    warmup = config.warmup_epochs * spe
    schedule = SigmaSchedule(config.task.sigma_0, config.task.sigma_T, total)
    snapshot = config_snapshot(config, model_cfg)

    model = DropPosModel(model_cfg, seed=config.seed)
    params = model.params
    state = OptimizerState.zeros_like(params, beta1=config.beta1, beta2=config.beta2,
                                      eps=config.eps, weight_decay=config.weight_decay)
    step = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model.load_state_dict(ck.params)
        state = OptimizerState({k: a.copy() for k, a in ck.optimizer.m.items()},
                               {k: a.copy() for k, a in ck.optimizer.v.items()},
                               ck.optimizer.step, ck.optimizer.beta1, ck.optimizer.beta2,
                               ck.optimizer.eps, ck.optimizer.weight_decay)
        step = ck.step
    rows = _read_metrics(metrics_path, step) if (metrics_path is not None and resume is not None) else []

    def snapshot_ck() -> Checkpoint:
        return Checkpoint(model.state_dict(), state, step, snapshot)

    def persist() -> None:
        if ck_path is not None:
            save_checkpoint(ck_path, snapshot_ck())
            _write_metrics(metrics_path, rows)

    pe_ref = model.pos_embed.copy()
    cache = SmoothingCache(model_cfg.grid_size, model_cfg.grid_size)
    every = config.checkpoint_every or spe
    end = total if stop_after is None else min(total, stop_after)
    if step == 0:
        persist()

    while step < end:
        epoch, bi = divmod(step, spe)
        for images, _ in batches(dataset, bs, config.seed, epoch, augment=config.augment, skip=bi):
            if step >= end:
                break
            sigma = sigma_at(step, schedule)
            lr = lr_at(step, total, warmup, config.base_lr, bs)
            res = forward_step(model, images, config.task, sigma, config.seed, step, cache)
            loss = res.loss.item()
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
            T.zero_grad(params.values())
            res.loss.backward()
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            if not np.array_equal(model.pos_embed, pe_ref):
                raise AssertionError("frozen positional table changed during training")
            rows.append({"step": step, "loss": repr(loss), "acc": repr(res.accuracy),
                         "lr": repr(lr), "sigma": repr(sigma)})
            step += 1
            if step % every == 0:
                persist()
                log.info("step %d/%d loss %.4f acc %.3f", step, total, loss, res.accuracy)
    if ck_path is not None and step % every:
        persist()
    return PretrainResult(model, snapshot_ck(), rows)
