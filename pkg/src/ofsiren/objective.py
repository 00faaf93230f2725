"""Observation loss, optical-flow constraint loss and their weighted sum."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .siren_net import JacobianResult, SirenModel, forward, forward_with_jacobian


class EmptyBatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.12

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class SampleBatch:
    """Normalized coordinates with their scaled RGB targets and flow vectors.

    ``flows`` rows are (dx/dt, dy/dt, 1) in normalized units.
    """

    coords: torch.Tensor
    targets: torch.Tensor | None = None
    flows: torch.Tensor | None = None

    def __post_init__(self):
        n = self.coords.shape[0]
        for name in ("targets", "flows"):
            t = getattr(self, name)
            if t is not None and (t.ndim != 2 or t.shape != (n, 3)):
                raise ValueError(f"{name} shape {tuple(t.shape)} does not match {n} coords")
        if self.flows is not None and n and not bool((self.flows[:, 2] == 1).all()):
            raise ValueError("flow vectors must have third component exactly 1")

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class LossReport:
    obs_loss: float
    of_loss: float
    total: float
    sample_count: int
    lam: float

    def csv_row(self, epoch: int) -> list:
        return [epoch, self.obs_loss, self.of_loss, self.total, self.lam]


def _warn_empty(what):
    warnings.warn(f"{what} evaluated on an empty batch; defined as 0", EmptyBatchWarning, stacklevel=3)


def observation_loss_from_values(values: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the squared Euclidean RGB error."""
    if values.shape[0] == 0:
        _warn_empty("observation loss")
        return values.sum() * 0.0
    return ((values - targets) ** 2).sum(dim=1).mean()


def flow_constraint_from_jacobian(jac: torch.Tensor, flows: torch.Tensor) -> torch.Tensor:
    """Mean |D . F| over samples and channels.

    ``jac`` is (N, 3 axes, 3 channels), ``flows`` is (N, 3).
    """
    if jac.shape[0] == 0:
        _warn_empty("flow constraint loss")
        return jac.sum() * 0.0
    dots = (jac * flows.unsqueeze(-1)).sum(dim=1)
    return dots.abs().mean()


def observation_loss(model: SirenModel, batch: SampleBatch) -> torch.Tensor:
    if batch.targets is None:
        raise ValueError("observation loss needs targets")
    return observation_loss_from_values(forward(model, batch.coords), batch.targets)


def flow_constraint_loss(model: SirenModel, batch: SampleBatch) -> torch.Tensor:
    if batch.flows is None:
        raise ValueError("flow constraint loss needs flows")
    jr = forward_with_jacobian(model, batch.coords)
    return flow_constraint_from_jacobian(jr.stacked(), batch.flows)


def combine(obs: torch.Tensor, of: torch.Tensor, lam: float) -> torch.Tensor:
    # endpoints return the single term untouched so its graph alone is traversed
    if lam == 0.0:
        return obs
    if lam == 1.0:
        return of
    return (1.0 - lam) * obs + lam * of


def loss_terms(model: SirenModel, batch: SampleBatch, cfg: LossConfig,
               jr: JacobianResult | None = None) -> tuple[torch.Tensor, LossReport]:
    """Differentiable total loss plus a detached report of both terms."""
    if batch.targets is None or batch.flows is None:
        raise ValueError("total loss needs both targets and flows")
    if jr is None:
        jr = forward_with_jacobian(model, batch.coords)
    obs = observation_loss_from_values(jr.value, batch.targets)
    of = flow_constraint_from_jacobian(jr.stacked(), batch.flows)
    total = combine(obs, of, cfg.lam)
    report = LossReport(
        obs_loss=float(obs.detach()),
        of_loss=float(of.detach()),
        total=float(total.detach()),
        sample_count=len(batch),
        lam=cfg.lam,
    )
    return total, report


def total_loss(model: SirenModel, batch: SampleBatch, cfg: LossConfig) -> LossReport:
    return loss_terms(model, batch, cfg)[1]
