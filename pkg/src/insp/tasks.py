"""Desk-scale experiment protocols shared by the CLI and the
acceptance suite: corruption pipelines, bulk network fitting, and
manifest plumbing.

The bulk fitter trains many identically shaped networks side by side
with one batched update per step; results are deterministic under the
protocol seed but are not expected to match item-by-item runs of the
single-network fitter bit for bit (each path owns its init streams).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DivergenceError
from .datasets import desk_image, digit_dataset
from .numerics import OptimizerState, adamw_step, stream
from .signal_io import (
    SignalGrid,
    add_gaussian_noise,
    decode,
    gaussian_blur_reference,
    lattice_coords,
    mask_pixels,
    psnr,
    save_pgm,
    to_constraints,
)
from .siren import SirenNetwork, save_inr

__all__ = [
    "TASK_TAGS",
    "corrupt_for_task",
    "target_for_task",
    "fit_many",
    "TaskData",
    "prepare_task_data",
    "prepare_digit_inrs",
    "read_manifest",
]

TASK_TAGS = ("blur", "denoise", "deblur", "inpaint")

BLUR_SIGMA_PX = 1.0
NOISE_SIGMA = 0.1
MASK_FRACTION = 0.3


def corrupt_for_task(task: str, img: SignalGrid, seed: int) -> SignalGrid:
    """The image whose fitted network feeds the operator."""
    if task == "blur":
        return img
    if task == "denoise":
        return add_gaussian_noise(img, NOISE_SIGMA, seed)
    if task == "deblur":
        return gaussian_blur_reference(img, BLUR_SIGMA_PX)
    if task == "inpaint":
        return mask_pixels(img, MASK_FRACTION, seed)
    raise ContractViolation(f"unknown task tag {task!r}; expected one of {TASK_TAGS}")


def target_for_task(task: str, img: SignalGrid) -> SignalGrid:
    """The grid the operator output is regressed onto."""
    if task == "blur":
        return gaussian_blur_reference(img, BLUR_SIGMA_PX)
    return img


def fit_many(
    grids: list[SignalGrid],
    hidden: tuple[int, ...] = (64, 64, 64),
    steps: int = 1200,
    lr: float = 1e-3,
    seed: int = 0,
    chunk: int = 200,
) -> list[SirenNetwork]:
    """Fit one network per grid, batched across instances.

    All grids must share shape and channel count.  Full-batch updates
    over the grid lattice; per-instance parameters evolve independently
    (the update is elementwise per network), only the matmuls fuse.
    """
    if not grids:
        raise ContractViolation("need at least one grid")
    shape = grids[0].spatial_shape
    c = grids[0].channels
    for g in grids:
        if g.spatial_shape != shape or g.channels != c:
            raise ContractViolation("bulk fitting wants identically shaped grids")
    m = grids[0].m
    coords = lattice_coords(shape)
    nets: list[SirenNetwork] = []
    for lo in range(0, len(grids), chunk):
        part = grids[lo : lo + chunk]
        nets.extend(_fit_chunk(part, coords, m, c, hidden, steps, lr, seed, lo))
    return nets


def _fit_chunk(grids, coords, m, c, hidden, steps, lr, seed, offset):
    n = len(grids)
    widths = [m, *hidden, c]
    omega0 = 30.0
    params: dict[str, np.ndarray] = {}
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        bound = 1.0 / m if i == 0 else np.sqrt(6.0 / fan_in) / omega0
        w = np.stack(
            [
                stream(seed, 50, offset + j, i).uniform(-bound, bound, size=(fan_in, fan_out))
                for j in range(n)
            ]
        )
        params[f"w{i}"] = w
        params[f"b{i}"] = np.zeros((n, 1, fan_out))
    targets = np.stack([g.samples.reshape(-1, c) * 2.0 - 1.0 for g in grids])
    xs = np.broadcast_to(coords, (n, *coords.shape))

    n_layers = len(widths) - 1
    state = OptimizerState(lr=lr, weight_decay=0.0)
    for step in range(steps):
        hs = [xs]
        pres = []
        h = xs
        for i in range(n_layers):
            pre = h @ params[f"w{i}"] + params[f"b{i}"]
            pres.append(pre)
            if i < n_layers - 1:
                scale = omega0 if i == 0 else 1.0
                h = np.sin(scale * pre)
            else:
                h = pre
            hs.append(h)
        resid = hs[-1] - targets
        if not np.isfinite(resid).all():
            raise DivergenceError(f"non-finite bulk-fit loss at step {step}")
        delta = 2.0 * resid / resid.shape[1]
        grads: dict[str, np.ndarray] = {}
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                scale = omega0 if i == 0 else 1.0
                delta = delta * (scale * np.cos(scale * pres[i]))
            grads[f"w{i}"] = np.swapaxes(hs[i], 1, 2) @ delta
            grads[f"b{i}"] = delta.sum(axis=1, keepdims=True)
            if i > 0:
                delta = delta @ np.swapaxes(params[f"w{i}"], 1, 2)
        params = adamw_step(params, grads, state)

    nets = []
    for j in range(n):
        ws = tuple(params[f"w{i}"][j].copy() for i in range(n_layers))
        bs = tuple(params[f"b{i}"][j, 0].copy() for i in range(n_layers))
        nets.append(SirenNetwork(m, c, omega0, ws, bs))
    return nets


@dataclass
class TaskData:
    """Fitted inputs plus targets for one restoration task."""

    task: str
    clean: list[SignalGrid]
    corrupted: list[SignalGrid]
    nets: list[SirenNetwork]
    n_train: int

    def train_pairs(self, coords: np.ndarray) -> list[tuple[SirenNetwork, np.ndarray, np.ndarray]]:
        pairs = []
        for i in range(self.n_train):
            target = target_for_task(self.task, self.clean[i])
            pairs.append((self.nets[i], coords, target.samples.reshape(-1, 1) * 2.0 - 1.0))
        return pairs

    def held_indices(self) -> range:
        return range(self.n_train, len(self.clean))

    def input_psnr(self, i: int) -> float:
        """Quality of the fitted input's decode against the task target."""
        ref = target_for_task(self.task, self.clean[i])
        return psnr(decode(self.nets[i], ref.spatial_shape), ref)


def prepare_task_data(
    task: str,
    n_train: int,
    n_held: int,
    seed: int = 0,
    size: int = 64,
    hidden: tuple[int, ...] = (64, 64, 64),
    fit_steps: int = 1200,
) -> TaskData:
    """Generate the desk split, corrupt inputs per task, and fit them."""
    total = n_train + n_held
    clean = [desk_image(seed * 10_000 + 7000 + i, size) for i in range(total)]
    corrupted = [corrupt_for_task(task, im, seed * 555 + i) for i, im in enumerate(clean)]
    nets = fit_many(corrupted, hidden=hidden, steps=fit_steps, seed=seed)
    return TaskData(task, clean, corrupted, nets, n_train)


def prepare_digit_inrs(
    out_dir: str | Path,
    n_train: int,
    n_test: int,
    seed: int = 0,
    hidden: tuple[int, ...] = (24, 24),
    fit_steps: int = 400,
    shuffle_train_labels: bool = False,
) -> tuple[Path, Path]:
    """Render digits, fit their networks in bulk, and write manifests
    of (network file, label) rows."""
    out = Path(out_dir)
    (out / "inrs").mkdir(parents=True, exist_ok=True)
    data = digit_dataset(seed, n_train + n_test)
    grids = [g for g, _ in data]
    labels = [l for _, l in data]
    if shuffle_train_labels:
        perm = stream(seed, 51).permutation(n_train)
        shuffled = [labels[p] for p in perm]
        labels = shuffled + labels[n_train:]
    nets = fit_many(grids, hidden=hidden, steps=fit_steps, seed=seed)
    manifests = []
    for split, lo, hi in (("train", 0, n_train), ("test", n_train, n_train + n_test)):
        lines = []
        for i in range(lo, hi):
            rel = f"inrs/{split}_{i - lo:05d}.insp"
            (out / rel).write_bytes(save_inr(nets[i]))
            lines.append(f"{rel},{labels[i]}")
        path = out / f"{split}.csv"
        path.write_text("\n".join(lines) + "\n")
        manifests.append(path)
    return manifests[0], manifests[1]


def read_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """Newline-delimited two-column rows, second column free-form;
    paths resolve relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        first, _, second = line.partition(",")
        if not second:
            raise ContractViolation(f"manifest line {line!r} is not 'a,b'")
        rows.append((base / first.strip(), second.strip()))
    return rows
