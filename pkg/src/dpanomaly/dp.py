"""Differentially private SGD: per-example clipping, Gaussian noising, training loop.

Noise convention: the standard deviation added to the *sum* of clipped
per-example gradients is ``sigma * C``, so the sensitivity of that sum is
exactly ``C`` and ``sigma`` is the noise multiplier the accountant expects.
With ``C = 1`` this is the same as adding N(0, sigma^2).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from dpanomaly.nn.model import Model
from dpanomaly.privacy import AccountantState

log = logging.getLogger(__name__)

# stream ids for SeedSequence spawning; fixed so seeds stay meaningful across versions
_SHUFFLE_STREAM = 0
_NOISE_STREAM = 1
_POISSON_STREAM = 2


class ContractError(ValueError):
    """An input violates a documented precondition."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``model`` holds the last finite state."""

    def __init__(self, msg: str, model: Model, step: int, epoch_losses: list[float]):
        super().__init__(msg)
        self.model = model
        self.step = step
        self.epoch_losses = epoch_losses


@dataclass
class DpConfig:
    """Training configuration. ``clip=None`` and ``sigma=None`` gives plain SGD."""

    clip: float | None = None
    sigma: float | None = None
    lr: float = 0.15
    batch_size: int = 200
    epochs: int = 20
    seed: int = 0
    sampling: str = "shuffle"
    delta: float = 1e-5

    def validate(self, n: int | None = None) -> None:
        if self.sigma is not None and self.clip is None:
            raise ContractError("noise scale requires a clipping bound")
        if self.sigma is not None and self.sigma < 0:
            raise ContractError("noise scale must be non-negative")
        if self.clip is not None and self.clip <= 0:
            raise ContractError("clipping bound must be positive")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.sampling not in ("shuffle", "poisson"):
            raise ContractError(f"unknown sampling mode {self.sampling!r}")
        if self.epochs < 0:
            raise ContractError("epochs must be non-negative")
        if self.batch_size < 1 or (n is not None and self.batch_size > n):
            raise ContractError(f"batch size must lie in [1, {n}]")

    @property
    def private(self) -> bool:
        """True when Gaussian noise with a positive scale is added."""
        return self.sigma is not None and self.sigma > 0

    @property
    def label(self) -> str:
        if self.clip is None:
            return "N/A"
        return f"C={self.clip:g},sigma={self.sigma if self.sigma is not None else 0:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DpConfig:
        return cls(**d)


@dataclass
class TrainReport:
    epoch_losses: list[float]
    model: Model
    epsilon: float
    wall_time: float
    epsilons: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    sampling: str = "shuffle"

    def jsonl(self) -> str:
        lines = []
        for i, loss in enumerate(self.epoch_losses):
            rec = {
                "epoch": i + 1,
                "mean_loss": loss,
                "epsilon": self.epsilons[i] if self.epsilons else 0.0,
                "seconds": self.seconds[i] if self.seconds else None,
            }
            lines.append(json.dumps(rec))
        return "\n".join(lines) + ("\n" if lines else "")


def clip_gradient(g: np.ndarray, C: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, C / ||g||_2)``."""
    if C <= 0:
        raise ContractError(f"clipping bound must be positive, got {C}")
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ContractError("gradient contains non-finite values")
    norm = float(np.sqrt(np.dot(g.ravel(), g.ravel())))
    if norm <= C:
        return g.copy()
    return g * (C / norm)


def noisy_aggregate(batch: np.ndarray, sigma: float, C: float, rng: np.random.Generator) -> np.ndarray:
    """``(sum of rows + N(0, (sigma C)^2 I)) / B`` over already clipped rows."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    norms = np.sqrt(np.einsum("bi,bi->b", batch, batch))
    if np.any(norms > C + 1e-9):
        raise ContractError(f"row norm {norms.max():.6g} exceeds clipping bound {C}")
    total = batch.sum(axis=0)
    if sigma > 0:
        total = total + rng.normal(0.0, sigma * C, size=total.shape)
    return total / batch.shape[0]


def noise_rng(seed: int, step: int) -> np.random.Generator:
    """Independent noise stream for one step, a pure function of (seed, step)."""
    return np.random.default_rng(np.random.SeedSequence([seed, _NOISE_STREAM, step]))


def _update_direction(model: Model, x, y, cfg: DpConfig, rng, expected_batch: int) -> tuple[np.ndarray, np.ndarray]:
    losses = model.backprop(x, y)
    b = len(losses)
    if cfg.clip is None:
        return model.weighted_grad(np.full(b, 1.0 / b)), losses
    norms = np.sqrt(model.sq_norms())
    factors = np.minimum(1.0, cfg.clip / np.maximum(norms, 1e-300))
    total = model.weighted_grad(factors)
    if cfg.private:
        total = total + rng.normal(0.0, cfg.sigma * cfg.clip, size=total.shape)
    denom = expected_batch if cfg.sampling == "poisson" else b
    return total / denom, losses


def dp_sgd_step(model: Model, x, y, cfg: DpConfig, rng: np.random.Generator) -> Model:
    """One update ``params -= lr * noisy_mean(clipped per-example grads)``; in place, returns model."""
    cfg.validate()
    if len(x) == 0:
        raise ContractError("empty batch")
    g, losses = _update_direction(model, x, y, cfg, rng, cfg.batch_size)
    if not np.isfinite(losses).all() or not np.isfinite(g).all():
        raise TrainingDiverged("non-finite loss or gradient", model.copy(), 0, [])
    model.set_flat_params(model.flat_params() - cfg.lr * g)
    return model


def _batches(n: int, cfg: DpConfig, epoch: int):
    steps = math.ceil(n / cfg.batch_size)
    if cfg.sampling == "shuffle":
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHUFFLE_STREAM, epoch])).permutation(n)
        for s in range(steps):
            yield perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _POISSON_STREAM, epoch]))
        q = cfg.batch_size / n
        for _ in range(steps):
            yield np.flatnonzero(rng.random(n) < q)


def train(
    model: Model,
    x,
    y,
    cfg: DpConfig,
    accountant: AccountantState | None = None,
    on_epoch=None,
) -> TrainReport:
    """Run ``epochs * ceil(N / B)`` steps of (DP-)SGD on ``model`` in place.

    ``y`` may be None for autoencoders. When noise is active and no accountant
    is given, one is created with ``q = B / N``. ``on_epoch`` receives
    ``(epoch, mean_loss, epsilon, seconds)`` after every epoch.
    """
    n = len(x)
    if n == 0:
        raise ContractError("empty dataset")
    cfg.validate(n)
    if accountant is None and cfg.private:
        accountant = AccountantState(q=cfg.batch_size / n, sigma=cfg.sigma, delta=cfg.delta)
    t0 = time.perf_counter()
    epoch_losses: list[float] = []
    epsilons: list[float] = []
    seconds: list[float] = []
    step = 0
    eps = 0.0 if cfg.private else (math.inf if cfg.epochs > 0 else 0.0)
    for epoch in range(cfg.epochs):
        te = time.perf_counter()
        loss_sum, count = 0.0, 0
        for idx in _batches(n, cfg, epoch):
            rng = noise_rng(cfg.seed, step)
            if len(idx) == 0:
                # Poisson sampling drew nobody: the release is pure noise
                g = np.zeros(model.n_params)
                if cfg.private:
                    g = rng.normal(0.0, cfg.sigma * cfg.clip, size=g.shape) / cfg.batch_size
                losses = np.zeros(0)
            else:
                xb = x[idx]
                yb = None if y is None else y[idx]
                g, losses = _update_direction(model, xb, yb, cfg, rng, cfg.batch_size)
            if not np.isfinite(losses).all() or not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step}", model.copy(), step, epoch_losses)
            model.set_flat_params(model.flat_params() - cfg.lr * g)
            loss_sum += float(losses.sum())
            count += len(losses)
            step += 1
            if cfg.private:
                accountant.step()
        mean_loss = loss_sum / max(count, 1)
        if cfg.private:
            eps = accountant.epsilon()
        epoch_losses.append(mean_loss)
        epsilons.append(eps)
        seconds.append(time.perf_counter() - te)
        log.debug("epoch %d loss %.6f eps %.4g", epoch + 1, mean_loss, eps)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss, eps, seconds[-1])
    return TrainReport(
        epoch_losses=epoch_losses,
        model=model,
        epsilon=eps,
        wall_time=time.perf_counter() - t0,
        epsilons=epsilons,
        seconds=seconds,
        sampling=cfg.sampling,
    )
