"""Fit a sinusoidal network to point samples of a signal.

Training minimizes the mean-squared deviation from the sample
constraints with reverse-mode parameter gradients written out by hand
and AdamW.  Runs are fully deterministic under a fixed seed, batch
sampling included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DivergenceError
from .numerics import OptimizerState, adamw_step, stream
from .siren import SirenNetwork, build_siren

__all__ = ["ConstraintSet", "TrainConfig", "param_gradients", "fit_inr"]

FULL_BATCH_LIMIT = 4096


@dataclass
class ConstraintSet:
    """Point constraints: coordinates in [-1, 1]^m with target values."""

    coords: np.ndarray  # (n, m)
    targets: np.ndarray  # (n, c)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.coords.ndim != 2 or self.targets.ndim != 2:
            raise ContractViolation("coords and targets must be 2-D arrays")
        if len(self.coords) == 0:
            raise ContractViolation("constraint set must be nonempty")
        if len(self.coords) != len(self.targets):
            raise ContractViolation(
                f"{len(self.coords)} coordinates vs {len(self.targets)} targets"
            )
        if np.abs(self.coords).max() > 1.0 + 1e-12:
            raise ContractViolation("coordinates must lie in [-1, 1]^m")
        if not np.all(np.isfinite(self.targets)):
            raise ContractViolation("targets must be finite")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int | None = None  # None: full batch up to FULL_BATCH_LIMIT
    lr: float = 1e-4
    seed: int = 0
    loss: str = "mse"
    early_stop_psnr: float | None = None
    weight_decay: float = 0.0
    eval_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation(f"steps must be >= 1, got {self.steps}")
        if self.loss != "mse":
            raise ContractViolation(f"unsupported loss tag {self.loss!r}")


def _forward_trace(params: dict[str, np.ndarray], n_layers: int, omega0: float, xs: np.ndarray):
    """Forward pass keeping pre-activations for the backward sweep."""
    h = xs
    hs = [h]
    pres = []
    for i in range(n_layers):
        pre = h @ params[f"w{i}"] + params[f"b{i}"]
        pres.append(pre)
        if i < n_layers - 1:
            scale = omega0 if i == 0 else 1.0
            h = np.sin(scale * pre)
        else:
            h = pre
        hs.append(h)
    return hs, pres


def param_gradients(
    net: SirenNetwork, batch: ConstraintSet
) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of the mean-squared loss over the batch, plus the loss.

    Exact reverse mode; validated against parameter finite differences
    in the test suite.
    """
    params = net.params()
    grads, loss = _gradients_from_params(
        params, net.n_layers, net.omega0, batch.coords, batch.targets
    )
    return grads, loss


def _gradients_from_params(params, n_layers, omega0, xs, targets):
    hs, pres = _forward_trace(params, n_layers, omega0, xs)
    resid = hs[-1] - targets
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite fitting loss")
    grads: dict[str, np.ndarray] = {}
    delta = 2.0 * resid / len(xs)  # d loss / d output
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            scale = omega0 if i == 0 else 1.0
            delta = delta * (scale * np.cos(scale * pres[i]))
        grads[f"w{i}"] = hs[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params[f"w{i}"].T
    return grads, loss


def _full_loss(params, n_layers, omega0, data: ConstraintSet) -> float:
    hs, _ = _forward_trace(params, n_layers, omega0, data.coords)
    resid = hs[-1] - data.targets
    return float(np.mean(np.sum(resid * resid, axis=1)))


def fit_inr(
    data: ConstraintSet,
    m: int | None = None,
    c: int | None = None,
    hidden: list[int] | tuple[int, ...] = (128, 128, 128, 128),
    omega0: float = 30.0,
    cfg: TrainConfig | None = None,
    progress=None,
) -> tuple[SirenNetwork, list[float]]:
    """Fit a network to the constraints; returns the best-loss snapshot
    and the per-step loss history.

    ``progress`` may be a callable taking (step, loss); the CLI uses it
    to stream training lines.
    """
    cfg = cfg or TrainConfig()
    m = m if m is not None else data.coords.shape[1]
    c = c if c is not None else data.targets.shape[1]
    template = build_siren(m, c, hidden, omega0, seed=cfg.seed)
    params = template.params()
    n_layers = template.n_layers

    n = len(data)
    batch = cfg.batch_size
    if batch is None:
        batch = n if n <= FULL_BATCH_LIMIT else 1024
    batch = min(batch, n)
    full = batch == n

    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[float] = []
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}

    def consider(current: float, snapshot: dict[str, np.ndarray]) -> None:
        nonlocal best_loss, best_params
        if current < best_loss:
            best_loss = current
            best_params = {k: v.copy() for k, v in snapshot.items()}

    def reached_target(current: float) -> bool:
        if cfg.early_stop_psnr is None:
            return False
        # values live in [-1, 1]; the [0, 1] decode halves the error
        psnr = 10.0 * np.log10(1.0 / max(current / 4.0, 1e-300))
        return psnr >= cfg.early_stop_psnr

    for step in range(cfg.steps):
        if full:
            xs, ts = data.coords, data.targets
        else:
            idx = stream(cfg.seed, 1, step).integers(0, n, size=batch)
            xs, ts = data.coords[idx], data.targets[idx]
        try:
            grads, loss = _gradients_from_params(params, n_layers, omega0, xs, ts)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at step {step}") from exc
        history.append(loss)
        if progress is not None:
            progress(step, loss)
        if full:
            consider(loss, params)  # loss was measured at these params
            if reached_target(loss):
                return template.with_params(best_params), history
        params = adamw_step(params, grads, state)
        if not full and step % cfg.eval_every == cfg.eval_every - 1:
            current = _full_loss(params, n_layers, omega0, data)
            consider(current, params)
            if reached_target(current):
                return template.with_params(best_params), history

    consider(_full_loss(params, n_layers, omega0, data), params)
    return template.with_params(best_params), history
