"""Adaptive task weighting plus shared/specific feature decoupling.

Task weighting watches per-window average losses. A task's change rate
is the ratio of its last two completed window averages (1 until two
windows exist or when a window average is non-positive). Weights are a
temperature softmax over the PREVIOUS window's change rates, scaled so
they always sum to the task count; hotter rates (slow or regressing
tasks) get more weight. The weights and any per-task loss scales are
plain floats: no gradient flows through them.

Decoupling penalizes alignment between the pooled shared feature and
each task's pooled specific feature via cosine similarity. Its factor
mu ramps linearly over training so early epochs optimize accuracy first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyList, InvalidConfig, LengthMismatch
from .tensor import Tensor

DECOUPLE_MODES = ("abs", "cos", "cos2")


@dataclass
class DecoupleConfig:
    mode: str = "abs"
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in DECOUPLE_MODES:
            raise InvalidConfig(f"decouple mode {self.mode!r} not in {DECOUPLE_MODES}")
        if self.eps <= 0:
            raise InvalidConfig(f"eps must be positive, got {self.eps}")


class LossHistory:
    """Per-task batch losses folded into fixed-length window averages."""

    def __init__(self, num_tasks: int, window: int):
        if num_tasks < 1:
            raise InvalidConfig(f"num_tasks must be >= 1, got {num_tasks}")
        if window < 1:
            raise InvalidConfig(f"window must be >= 1, got {window}")
        self.num_tasks = num_tasks
        self.window = window
        self._pending: list[np.ndarray] = []
        self._windows: list[np.ndarray] = []

    def push(self, losses) -> bool:
        """Record one step's batch-mean losses; True if a window closed."""
        arr = np.asarray(losses, dtype=np.float64)
        if arr.shape != (self.num_tasks,):
            raise LengthMismatch(f"expected {self.num_tasks} losses, got {arr.shape}")
        self._pending.append(arr)
        if len(self._pending) == self.window:
            self._windows.append(np.mean(self._pending, axis=0))
            self._pending = []
            return True
        return False

    def completed(self) -> np.ndarray:
        """(num_windows, num_tasks) matrix of window averages."""
        if not self._windows:
            return np.zeros((0, self.num_tasks))
        return np.stack(self._windows)

    @property
    def num_windows(self) -> int:
        return len(self._windows)


def _guarded_ratio(curr: np.ndarray, prev: np.ndarray) -> np.ndarray:
    ok = (curr > 0) & (prev > 0)
    out = np.ones_like(curr)
    out[ok] = curr[ok] / prev[ok]
    return out


def change_rate(h: LossHistory, j: int) -> float:
    """Ratio of the last two window averages for task j; 1 on cold start."""
    return float(change_rates(h)[j])


def change_rates(h: LossHistory) -> np.ndarray:
    w = h.completed()
    if len(w) < 2:
        return np.ones(h.num_tasks)
    return _guarded_ratio(w[-1], w[-2])


def lagged_change_rates(h: LossHistory) -> np.ndarray:
    """Change rates as of one window earlier, which is what weights use."""
    w = h.completed()
    if len(w) < 3:
        return np.ones(h.num_tasks)
    return _guarded_ratio(w[-2], w[-3])


def weights_from_ratios(ratios, temperature: float = 2.0) -> np.ndarray:
    """Temperature softmax over change rates, scaled to sum to the task
    count. Equal rates (the cold-start case) give every task exactly 1."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise EmptyList(f"ratios must be a non-empty vector, got shape {r.shape}")
    if temperature <= 0:
        raise InvalidConfig(f"temperature must be positive, got {temperature}")
    z = r / temperature
    e = np.exp(z - z.max())
    return r.size * e / e.sum()


def task_weights(h: LossHistory, temperature: float = 2.0) -> np.ndarray:
    return weights_from_ratios(lagged_change_rates(h), temperature)


def d_task_loss(losses: list[Tensor], weights, loss_scales=None) -> Tensor:
    """Weighted sum of per-task scalar losses; weights stay out of the graph."""
    if not losses:
        raise EmptyList("no task losses")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(losses),):
        raise LengthMismatch(f"{len(losses)} losses vs weights {w.shape}")
    if loss_scales is None:
        scales = np.ones(len(losses))
    else:
        scales = np.asarray(loss_scales, dtype=np.float64)
        if scales.shape != (len(losses),):
            raise LengthMismatch(f"{len(losses)} losses vs scales {scales.shape}")
    total = None
    for loss, wj, lj in zip(losses, w, scales):
        term = T.mul(loss, float(wj * lj))
        total = term if total is None else T.add(total, term)
    return total


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine along the last axis; norms carry an eps floor so zero
    vectors stay finite in both directions."""
    if a.shape != b.shape:
        raise LengthMismatch(f"cosine {a.shape} vs {b.shape}")
    dot = T.tsum(T.mul(a, b), axis=-1)
    na = T.sqrt(T.add(T.tsum(T.mul(a, a), axis=-1), eps * eps))
    nb = T.sqrt(T.add(T.tsum(T.mul(b, b), axis=-1), eps * eps))
    return T.div(dot, T.mul(na, nb))


def decouple_loss(f_sh: Tensor, f_sp: list[Tensor], cfg: DecoupleConfig | None = None) -> Tensor:
    """Sum over tasks of the similarity penalty between shared and
    specific pooled features; batched inputs average over the batch."""
    if not f_sp:
        raise EmptyList("no specific features")
    cfg = cfg or DecoupleConfig()
    total = None
    for f in f_sp:
        c = cosine_similarity(f_sh, f, cfg.eps)
        if cfg.mode == "abs":
            term = T.absolute(c)
        elif cfg.mode == "cos":
            term = c
        else:
            term = T.mul(c, c)
        if term.ndim > 0 and term.shape != ():
            term = T.tmean(term)
        total = term if total is None else T.add(total, term)
    return total


def mu_schedule(
    step: int,
    total_steps: int,
    mu_start: float = 0.01,
    mu_end: float = 0.1,
    ramp_fraction: float = 1.0,
) -> float:
    """Linear ramp from mu_start to mu_end over the first ramp_fraction
    of training; clamped flat afterwards."""
    if total_steps < 1:
        raise InvalidConfig(f"total_steps must be >= 1, got {total_steps}")
    if not 0.0 < ramp_fraction <= 1.0:
        raise InvalidConfig(f"ramp_fraction must be in (0, 1], got {ramp_fraction}")
    ramp_steps = max(1.0, ramp_fraction * (total_steps - 1))
    frac = min(1.0, step / ramp_steps)
    return mu_start + (mu_end - mu_start) * frac


def afd_total(d_task: Tensor, decouple: Tensor, mu: float) -> Tensor:
    return T.add(d_task, T.mul(decouple, float(mu)))


def change_rate_trace(h: LossHistory) -> np.ndarray:
    """(num_windows, num_tasks) consecutive window ratios; row 0 is 1."""
    w = h.completed()
    if len(w) == 0:
        return np.zeros((0, h.num_tasks))
    out = np.ones_like(w)
    for m in range(1, len(w)):
        out[m] = _guarded_ratio(w[m], w[m - 1])
    return out
