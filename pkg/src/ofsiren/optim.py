"""Adam with a cosine learning-rate schedule and the epoch-based fitting loop."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .metrics import psnr
from .objective import LossConfig, loss_terms
from .siren_net import SirenModel, load_model, parameter_gradients, save_model
from .video_store import ObservedSamples, VideoTensor, render_frames

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "obs_loss", "of_loss", "total", "observed_psnr", "interp_psnr"]
MODEL_FILE = "model.fsir"
STATE_FILE = "train_state.npz"
LOG_FILE = "train_log.csv"


class NonFiniteGradient(FloatingPointError):
    pass


class NumericalAbort(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-5
    epochs: int = 5000
    batch_size: int = 4096
    lam: float = 0.12
    seed: int = 0
    precision: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ValueError(f"max_lr must be positive, got {self.max_lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        LossConfig(self.lam)
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyper-parameters")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be >= 0")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32


@dataclass
class TrainState:
    step: int
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    rng: np.random.Generator
    lr: float = 0.0
    epoch: int = 0

    @classmethod
    def fresh(cls, model: SirenModel, seed: int) -> "TrainState":
        params = model.parameter_list()
        return cls(
            step=0,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            rng=np.random.default_rng(seed),
        )

    def save(self, path) -> None:
        arrays = {f"m{i}": t.numpy() for i, t in enumerate(self.m)}
        arrays.update({f"v{i}": t.numpy() for i, t in enumerate(self.v)})
        meta = {"step": self.step, "lr": self.lr, "epoch": self.epoch,
                "rng": self.rng.bit_generator.state}
        with open(path, "wb") as f:
            np.savez(f, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path, model: SirenModel) -> "TrainState":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            n = len(model.parameter_list())
            m = [torch.from_numpy(data[f"m{i}"].copy()) for i in range(n)]
            v = [torch.from_numpy(data[f"v{i}"].copy()) for i in range(n)]
        for p, mi in zip(model.parameter_list(), m):
            if mi.shape != p.shape:
                raise ValueError(f"{path}: moment shape {tuple(mi.shape)} != parameter {tuple(p.shape)}")
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return cls(step=meta["step"], m=m, v=v, rng=rng, lr=meta["lr"], epoch=meta["epoch"])


def cosine_lr(step: int, total_steps: int, max_lr: float) -> float:
    """max_lr * (1 + cos(pi * step / total_steps)) / 2, no warmup."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(model: SirenModel, grads: list[torch.Tensor], state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place.  Returns (model, state).

    Gradients are checked before anything is touched; a non-finite one
    aborts the step and names its parameter.
    """
    params = model.parameter_list()
    names = model.parameter_names()
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    state.step += 1
    state.lr = lr
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return model, state


@dataclass
class EpochLog:
    epoch: int
    lr: float
    obs_loss: float
    of_loss: float
    total: float
    observed_psnr: float = math.nan
    interp_psnr: float = math.nan

    def row(self) -> list[str]:
        out = []
        for name in LOG_COLUMNS:
            val = getattr(self, name)
            if isinstance(val, float):
                out.append("" if math.isnan(val) else repr(val))
            else:
                out.append(str(val))
        return out

    @classmethod
    def from_row(cls, row: dict) -> "EpochLog":
        vals = {k: (math.nan if row[k] == "" else float(row[k])) for k in LOG_COLUMNS[1:]}
        return cls(epoch=int(row["epoch"]), **vals)


@dataclass
class FitResult:
    model: SirenModel
    history: list[EpochLog]
    state: TrainState
    extra: dict = field(default_factory=dict)


def evaluate_psnr(model: SirenModel, video: VideoTensor) -> tuple[float, float]:
    """Mean per-frame PSNR over observed and held-out frames."""
    def mean_for(indices):
        if not indices:
            return math.nan
        rendered = render_frames(model, indices, video.dims).frames
        vals = [psnr(r, video.frames[k]) for r, k in zip(rendered, indices)]
        return float(np.mean(np.minimum(vals, 99.0)))
    return mean_for(video.observed), mean_for(video.held_out)


def _snapshot(model: SirenModel, state: TrainState):
    params = [p.detach().clone() for p in model.parameter_list()]
    return params, copy.deepcopy(state)


def _write_checkpoint(directory: Path, model: SirenModel, state: TrainState) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    save_model(model, directory / MODEL_FILE)
    state.save(directory / STATE_FILE)
    return directory / MODEL_FILE


def write_log(path, history: list[EpochLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for h in history:
            w.writerow(h.row())


def read_log(path) -> list[EpochLog]:
    with open(path, newline="") as f:
        return [EpochLog.from_row(r) for r in csv.DictReader(f)]


def fit(model: SirenModel, video: VideoTensor, flow, cfg: TrainConfig, *,
        out_dir=None, resume: bool = False, samples: ObservedSamples | None = None) -> FitResult:
    """Minimize (1 - lam) L_obs + lam L_of over the observed frames.

    One epoch is a pass over a fresh random permutation of every observed
    pixel; the learning rate follows the cosine schedule per step.  With
    ``out_dir`` set, the log is rewritten after every epoch and checkpoints
    land there every ``checkpoint_every`` epochs and at the end.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    loss_cfg = LossConfig(cfg.lam)
    if samples is None:
        samples = ObservedSamples(video, flow, dtype=model.dtype)
    spe = samples.steps_per_epoch(cfg.batch_size)
    total_steps = cfg.epochs * spe

    history: list[EpochLog] = []
    if resume:
        if out_dir is None or not (out_dir / STATE_FILE).exists():
            raise FileNotFoundError(f"no checkpoint to resume from in {out_dir}")
        loaded = load_model(out_dir / MODEL_FILE, expect=model.config, dtype=model.dtype)
        with torch.no_grad():
            for p, q in zip(model.parameter_list(), loaded.parameter_list()):
                p.copy_(q)
        state = TrainState.load(out_dir / STATE_FILE, model)
        if (out_dir / LOG_FILE).exists():
            history = [h for h in read_log(out_dir / LOG_FILE) if h.epoch < state.epoch]
        log.info("resuming at epoch %d, step %d", state.epoch, state.step)
    else:
        state = TrainState.fresh(model, cfg.seed)

    for epoch in range(state.epoch, cfg.epochs):
        last_good = _snapshot(model, state)
        sums = np.zeros(3)
        count = 0
        lr = state.lr
        for batch in samples.batches(cfg.batch_size, state.rng):
            lr = cosine_lr(state.step, total_steps, cfg.max_lr)
            total, report = loss_terms(model, batch, loss_cfg)
            if not math.isfinite(report.total):
                raise _abort(out_dir, model, last_good, f"non-finite loss at epoch {epoch}, step {state.step}")
            grads = parameter_gradients(model, total)
            try:
                adam_step(model, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            except NonFiniteGradient as exc:
                raise _abort(out_dir, model, last_good, f"epoch {epoch}: {exc}") from exc
            sums += np.array([report.obs_loss, report.of_loss, report.total]) * report.sample_count
            count += report.sample_count
        state.epoch = epoch + 1
        means = sums / count
        entry = EpochLog(epoch, lr, *means.tolist())
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            entry.observed_psnr, entry.interp_psnr = evaluate_psnr(model, video)
        history.append(entry)
        log.debug("epoch %d lr %.3g obs %.5g of %.5g", epoch, lr, means[0], means[1])
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_log(out_dir / LOG_FILE, history)
            if epoch + 1 == cfg.epochs or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                _write_checkpoint(out_dir, model, state)
    return FitResult(model, history, state)


def _abort(out_dir, model, last_good, message) -> NumericalAbort:
    params, state = last_good
    with torch.no_grad():
        for p, q in zip(model.parameter_list(), params):
            p.copy_(q)
    ckpt = None
    if out_dir is not None:
        ckpt = _write_checkpoint(out_dir, model, state)
        message += f"; last good checkpoint: {ckpt}"
    return NumericalAbort(message, ckpt)
