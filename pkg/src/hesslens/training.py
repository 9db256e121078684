"""Optimizers, learning-rate schedules and the training loop.

SGD with momentum, Adam, AdamW (decoupled decay) and Gadam (AdamW plus
tail iterate averaging) share one loop. Everything is driven by explicit
seeds; two runs with the same config produce bit-identical histories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dual as D
from .linalg import Rng
from .models import (
    BatchNormState,
    Dataset,
    ModelSpec,
    ParamVector,
    accuracy,
    batch_stats_from_caches,
    blocks_from_flat,
    ce_pieces,
    flat_from_blocks,
    init_bn_state,
    init_params,
    net_backward,
    net_forward,
    update_running_stats,
)

__all__ = [
    "AveragedState",
    "AdamState",
    "DivergenceError",
    "SgdState",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "adamw_step",
    "evaluate",
    "gadam_run",
    "history_to_csv",
    "lr_schedule",
    "lr_schedule_avg",
    "recompute_bn_stats",
    "sgd_step",
    "train",
]

OPTIMIZERS = ("sgd", "adam", "adamw", "gadam")
DIVERGENCE_LOSS = 1e6

HISTORY_FIELDS = (
    "epoch",
    "lr",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "weight_norm",
)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.03  # alpha_0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mu_l2: float = 0.0
    lambda_decoupled: float = 0.0
    epochs: int = 50
    t_avg: int | None = None  # averaging start epoch (gadam)
    batch_size: int = 64
    final_lr_fraction: float = 0.01  # r
    seed: int = 0
    avg_schedule_mode: str = "as_printed"  # or "consistent"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must be in (0, 1)")
        if not (0.0 < self.final_lr_fraction <= 1.0):
            raise ValueError("final_lr_fraction must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.mu_l2 < 0 or self.lambda_decoupled < 0:
            raise ValueError("decay coefficients must be nonnegative")
        if self.averaging_enabled:
            if self.t_avg is None or not (0 <= self.t_avg < self.epochs):
                raise ValueError("averaging needs 0 <= t_avg < epochs")
        if self.avg_schedule_mode not in ("as_printed", "consistent"):
            raise ValueError(f"bad avg_schedule_mode {self.avg_schedule_mode!r}")

    @property
    def averaging_enabled(self) -> bool:
        return self.optimizer == "gadam"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


def lr_schedule(t: float, cfg: TrainConfig) -> float:
    """Linear-decay schedule: flat, ramp down over (0.5, 0.9], then flat
    at alpha_0 * r."""
    ratio = t / cfg.epochs
    if ratio <= 0.5:
        return cfg.lr
    if ratio <= 0.9:
        return cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * (ratio - 0.5) / 0.4)
    return cfg.lr * cfg.final_lr_fraction


def lr_schedule_avg(t: float, cfg: TrainConfig) -> float:
    """Schedule used with iterate averaging; settles at alpha_avg = alpha_0/2.

    The published form conditions the branches on t/T_avg but writes the
    ramp in t/T; ``avg_schedule_mode="as_printed"`` keeps that mixed form,
    ``"consistent"`` uses t/T_avg in the ramp too (which is the variant
    that is continuous at both knots for any T_avg).
    """
    if cfg.t_avg is None:
        raise ValueError("lr_schedule_avg needs cfg.t_avg")
    alpha_avg = 0.5 * cfg.lr
    ratio_avg = t / cfg.t_avg if cfg.t_avg > 0 else math.inf
    if ratio_avg <= 0.5:
        return cfg.lr
    if ratio_avg <= 0.9:
        ramp = t / cfg.epochs if cfg.avg_schedule_mode == "as_printed" else ratio_avg
        return cfg.lr * (1.0 - (1.0 - alpha_avg / cfg.lr) * (ramp - 0.5) / 0.4)
    return alpha_avg


# ---------------------------------------------------------------------------
# Optimizer steps (pure state transforms)
# ---------------------------------------------------------------------------


@dataclass
class SgdState:
    w: np.ndarray
    z: np.ndarray  # momentum buffer


def sgd_step(state: SgdState, grad: np.ndarray, alpha: float, rho: float) -> SgdState:
    """z <- rho z + grad; w <- w - alpha z. L2 enters through grad."""
    z = rho * state.z + grad
    return SgdState(state.w - alpha * z, z)


@dataclass
class AdamState:
    w: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(
    state: AdamState,
    grad: np.ndarray,
    alpha: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    w = state.w - alpha * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(w, m, v, t)


def adamw_step(
    state: AdamState,
    grad: np.ndarray,
    alpha: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    lam: float = 0.0,
) -> AdamState:
    """Adam step plus decoupled decay w <- w - alpha*lam*w; the decay never
    enters the moment estimates."""
    decay = alpha * lam * state.w
    nxt = adam_step(state, grad, alpha, beta1, beta2, eps)
    return AdamState(nxt.w - decay, nxt.m, nxt.v, nxt.step)


@dataclass
class AveragedState:
    """Arithmetic mean of the iterates folded in so far (running sum)."""

    total: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, dim: int) -> "AveragedState":
        return cls(np.zeros(dim), 0)

    def update(self, w: np.ndarray) -> None:
        self.total = self.total + w
        self.count += 1

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no iterates averaged yet")
        return self.total / self.count


# ---------------------------------------------------------------------------
# Loss/gradient over one batch (value path)
# ---------------------------------------------------------------------------


def _batch_loss_grads(spec, flat, bn_state, x, y, mode):
    blocks = blocks_from_flat(spec, flat)
    logits, caches = net_forward(spec, blocks, bn_state, x, mode)
    loss, _, dlogits = ce_pieces(logits, y)
    grads = net_backward(spec, blocks, caches, dlogits, mode)
    gval, _ = flat_from_blocks(spec, grads)
    stats = batch_stats_from_caches(spec, caches)
    return float(D.val(loss)), gval, accuracy(logits, y), stats


def evaluate(
    spec: ModelSpec,
    params: ParamVector,
    bn_state: BatchNormState,
    ds: Dataset,
    mode: str = "eval",
    batch_size: int = 4096,
):
    """(mean loss, accuracy) over a dataset in fixed batch order."""
    blocks = blocks_from_flat(spec, params.flat)
    total_loss = 0.0
    correct = 0.0
    for start in range(0, ds.n, batch_size):
        sl = slice(start, min(start + batch_size, ds.n))
        x, y = ds.inputs[sl], ds.labels[sl]
        logits, _ = net_forward(spec, blocks, bn_state, x, mode)
        loss, _, _ = ce_pieces(logits, y)
        total_loss += float(D.val(loss)) * x.shape[0]
        correct += accuracy(logits, y) * x.shape[0]
    return total_loss / ds.n, correct / ds.n


def recompute_bn_stats(
    spec: ModelSpec,
    params: ParamVector,
    ds: Dataset,
    batch_size: int,
    momentum: float = 0.1,
) -> BatchNormState:
    """Fresh running statistics from one pass over the data: the exact
    average of per-batch statistics (effective momentum 1/num_batches).
    Needed before evaluating averaged weights in eval mode."""
    state = init_bn_state(spec, momentum=momentum)
    if not any(spec.batch_norm):
        return state
    blocks = blocks_from_flat(spec, params.flat)
    sums = [None] * spec.num_hidden
    count = 0
    for start in range(0, ds.n, batch_size):
        sl = slice(start, min(start + batch_size, ds.n))
        _, caches = net_forward(spec, blocks, state, ds.inputs[sl], "train")
        stats = batch_stats_from_caches(spec, caches)
        count += 1
        for l, s in enumerate(stats):
            if s is None:
                continue
            if sums[l] is None:
                sums[l] = [s[0].copy(), s[1].copy()]
            else:
                sums[l][0] += s[0]
                sums[l][1] += s[1]
    for l, s in enumerate(sums):
        if s is not None:
            state.running_mean[l] = s[0] / count
            state.running_var[l] = s[1] / count
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamVector
    bn_state: BatchNormState
    averaged_params: ParamVector | None
    averaged_bn_state: BatchNormState | None
    history: list
    config: TrainConfig


def train(
    spec: ModelSpec,
    train_ds: Dataset,
    cfg: TrainConfig,
    val_ds: Dataset | None = None,
) -> TrainResult:
    """Run the configured optimizer; bit-reproducible given (spec, data, cfg)."""
    rng = Rng(cfg.seed)
    params = init_params(spec, rng.child(0))
    bn = init_bn_state(spec)
    layout = params.layout

    if cfg.optimizer == "sgd":
        opt_state = SgdState(params.flat.copy(), np.zeros(params.size))
    else:
        opt_state = AdamState(
            params.flat.copy(), np.zeros(params.size), np.zeros(params.size)
        )
    averaged = AveragedState.empty(params.size) if cfg.averaging_enabled else None

    schedule = lr_schedule_avg if cfg.averaging_enabled else lr_schedule
    history = []
    n = train_ds.n
    for epoch in range(cfg.epochs):
        alpha = schedule(epoch, cfg)
        perm = rng.child(1000 + epoch).permutation(n)
        epoch_loss = 0.0
        epoch_acc = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x, y = train_ds.inputs[idx], train_ds.labels[idx]
            w = opt_state.w
            loss, grad, acc, stats = _batch_loss_grads(spec, w, bn, x, y, "train")
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise DivergenceError(
                    f"training diverged at epoch {epoch} (loss={loss!r})", history
                )
            update_running_stats(bn, stats)
            if cfg.mu_l2 > 0:
                grad = grad + cfg.mu_l2 * w
            if cfg.optimizer == "sgd":
                opt_state = sgd_step(opt_state, grad, alpha, cfg.momentum)
            elif cfg.optimizer == "adam":
                opt_state = adam_step(opt_state, grad, alpha, cfg.beta1, cfg.beta2, cfg.eps)
            else:  # adamw, gadam
                opt_state = adamw_step(
                    opt_state, grad, alpha, cfg.beta1, cfg.beta2, cfg.eps,
                    cfg.lambda_decoupled,
                )
            frac = x.shape[0] / n
            epoch_loss += frac * loss
            epoch_acc += frac * acc
        params = ParamVector(opt_state.w.copy(), layout)
        if averaged is not None and epoch >= cfg.t_avg:
            averaged.update(opt_state.w)
        row = {
            "epoch": epoch,
            "lr": alpha,
            "train_loss": epoch_loss,
            "train_acc": epoch_acc,
            "weight_norm": float(np.linalg.norm(opt_state.w)),
            "test_loss": math.nan,
            "test_acc": math.nan,
        }
        if val_ds is not None:
            row["test_loss"], row["test_acc"] = evaluate(spec, params, bn, val_ds)
        history.append(row)

    averaged_params = None
    averaged_bn = None
    if averaged is not None and averaged.count > 0:
        averaged_params = ParamVector(averaged.mean, layout)
        averaged_bn = recompute_bn_stats(
            spec, averaged_params, train_ds, cfg.batch_size, momentum=bn.momentum
        )
    return TrainResult(params, bn, averaged_params, averaged_bn, history, cfg)


def gadam_run(cfg: TrainConfig, spec: ModelSpec, train_ds: Dataset, val_ds=None):
    """Adam + decoupled decay + tail averaging; returns
    (final_params, averaged_params, history)."""
    if cfg.optimizer != "gadam":
        raise ValueError("gadam_run requires cfg.optimizer == 'gadam'")
    result = train(spec, train_ds, cfg, val_ds)
    return result.params, result.averaged_params, result.history


def history_to_csv(history: list) -> str:
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        lines.append(",".join(repr(row[k]) if k != "epoch" else str(row[k]) for k in HISTORY_FIELDS))
    return "\n".join(lines) + "\n"
