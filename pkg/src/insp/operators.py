"""Operators over derivative stacks: linear combinations, small fusion
MLPs, handcrafted presets, operator training, and lazy application.

A linear operator dots a real coefficient vector with the stack (one
entry per multi-index); the fusion variant runs a small ReLU MLP on the
flattened stack.  Either way the processed signal stays a continuous
function: ``process`` never materializes a grid.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    CapabilityError,
    ChecksumError,
    ContractViolation,
    DivergenceError,
    TruncatedFileError,
    VersionError,
)
from .jets import (
    DEFAULT_MAX_ORDER,
    DerivativeStack,
    full_tensor_multiplicities,
    jet_eval_many,
    jet_space,
    stack_size,
)
from .numerics import OptimizerState, adamw_step, stream
from .siren import SirenNetwork

__all__ = [
    "LinearOperator",
    "FusionMlpOperator",
    "GradientMagnitudeOperator",
    "RadialOperator",
    "apply_linear",
    "apply_fusion",
    "edge_detector",
    "rotation_invariant_op",
    "identity_operator",
    "laplacian_operator",
    "OperatorSpec",
    "train_operator",
    "ProcessedInr",
    "process",
    "eval_processed",
    "save_operator",
    "load_operator",
]

OP_MAGIC = b"INSQ"
OP_FORMAT_VERSION = 1

# default per-order feature scaling keeps MLP inputs O(1); raw partials
# of image networks grow roughly geometrically with the order
DEFAULT_FEATURE_SCALE_BASE = 0.05


def _stack_values(stack) -> np.ndarray:
    """Accept a DerivativeStack or a raw (channels, M) array."""
    if isinstance(stack, DerivativeStack):
        return stack.values
    return np.asarray(stack, dtype=np.float64)


def apply_linear(theta: np.ndarray, stack) -> np.ndarray:
    """Dot the coefficient vector with each channel's stack.

    theta has shape (M,) shared across channels, or (c, M) with one
    vector per channel.  Linear in both arguments.
    """
    values = _stack_values(stack)
    theta = np.asarray(theta, dtype=np.float64)
    m_len = values.shape[-1]
    if theta.ndim == 1:
        if theta.shape[0] != m_len:
            raise ContractViolation(
                f"coefficient length {theta.shape[0]} != stack length {m_len}"
            )
        return values @ theta
    if theta.shape != (values.shape[-2], m_len):
        raise ContractViolation(
            f"per-channel coefficients {theta.shape} do not match stack {values.shape[-2:]}"
        )
    return np.einsum("...cm,cm->...c", values, theta)


@dataclass
class FusionMlp:
    """Plain MLP with ReLU hidden layers and a fixed input scaling."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_scale: np.ndarray

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, feats: np.ndarray) -> np.ndarray:
        h = feats * self.feature_scale
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w.copy()
            out[f"b{i}"] = b.copy()
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        n = len(self.weights)
        self.weights = [np.asarray(params[f"w{i}"], dtype=np.float64) for i in range(n)]
        self.biases = [np.asarray(params[f"b{i}"], dtype=np.float64) for i in range(n)]


def build_fusion_mlp(
    input_width: int,
    hidden: tuple[int, ...] = (64, 64),
    output_width: int = 1,
    seed: int = 0,
    feature_scale: np.ndarray | None = None,
) -> FusionMlp:
    widths = [input_width, *hidden, output_width]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        weights.append(stream(seed, 30, i).uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if feature_scale is None:
        feature_scale = np.ones(input_width)
    return FusionMlp(weights, biases, np.asarray(feature_scale, dtype=np.float64))


def apply_fusion(mlp: FusionMlp, stack) -> np.ndarray:
    """Run the fusion MLP on a flattened stack."""
    values = _stack_values(stack)
    flat = values.reshape(*values.shape[:-2], -1)
    if flat.shape[-1] != mlp.input_width:
        raise ContractViolation(
            f"stack width {flat.shape[-1]} != MLP input width {mlp.input_width}"
        )
    return mlp.forward(flat)


def order_feature_scale(m: int, order: int, base: float) -> np.ndarray:
    """Fixed per-entry scaling base**|n|; a pure reparameterization."""
    space = jet_space(m, order)
    return base ** space.totals.astype(np.float64)


# ---------------------------------------------------------------------------
# operator variants
# ---------------------------------------------------------------------------


@dataclass
class LinearOperator:
    """Coefficient vector(s) over the derivative stack."""

    theta: np.ndarray  # (M,) shared or (c, M) per channel
    m: int
    order: int
    shared: bool = True

    variant = "linear"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        want = stack_size(self.m, self.order)
        got = self.theta.shape[-1]
        if got != want:
            raise ContractViolation(f"theta length {got} != stack length {want}")

    def apply_batch(self, stacks: np.ndarray) -> np.ndarray:
        """(P, c, M) -> (P, c_out)."""
        if self.theta.ndim == 1:
            return stacks @ self.theta
        return np.einsum("pcm,cm->pc", stacks, self.theta)

    @property
    def out_channels_like(self) -> int | None:
        return None if self.theta.ndim == 1 else self.theta.shape[0]


@dataclass
class FusionMlpOperator:
    """Learnable fusion map over the stack.

    Shared policy runs the MLP per channel on that channel's stack;
    the cross policy consumes all channels' stacks at once.
    """

    mlp: FusionMlp
    m: int
    order: int
    shared: bool = True

    variant = "fusion"

    def apply_batch(self, stacks: np.ndarray) -> np.ndarray:
        p, c, m_len = stacks.shape
        if self.shared:
            out = self.mlp.forward(stacks.reshape(p * c, m_len))
            return out.reshape(p, c * self.mlp.output_width)
        return self.mlp.forward(stacks.reshape(p, c * m_len))


@dataclass
class GradientMagnitudeOperator:
    """l2 norm of the first-order entries, averaged over channels."""

    m: int
    order: int = 1

    variant = "gradmag"
    shared = True

    def apply_batch(self, stacks: np.ndarray) -> np.ndarray:
        grad = stacks[:, :, 1 : 1 + self.m]
        mag = np.sqrt(np.sum(grad * grad, axis=2))
        return mag.mean(axis=1, keepdims=True)


@dataclass
class RadialOperator:
    """f applied to the Frobenius norm of the full stack, with the
    symmetric-tensor multiplicities restored per order."""

    f: object
    m: int
    order: int

    variant = "radial"
    shared = True

    def apply_batch(self, stacks: np.ndarray) -> np.ndarray:
        mult = full_tensor_multiplicities(jet_space(self.m, self.order))
        norms = np.sqrt(np.einsum("pcm,m->pc", stacks * stacks, mult))
        return np.vectorize(self.f)(norms).astype(np.float64)


InspOperator = LinearOperator | FusionMlpOperator | GradientMagnitudeOperator | RadialOperator


def identity_operator(m: int) -> LinearOperator:
    theta = np.zeros(stack_size(m, 0))
    theta[0] = 1.0
    return LinearOperator(theta, m, 0)


def laplacian_operator(m: int) -> LinearOperator:
    space = jet_space(m, 2)
    theta = np.zeros(space.size)
    for axis in range(m):
        n = [0] * m
        n[axis] = 2
        theta[space.index_of[tuple(n)]] = 1.0
    return LinearOperator(theta, m, 2)


def edge_detector(m: int, mode: str = "magnitude") -> InspOperator:
    """Unit weight on the first-order entries: either their plain sum
    (components) or their l2 magnitude."""
    if m < 1:
        raise ContractViolation(f"need m >= 1, got {m}")
    if mode == "components":
        space = jet_space(m, 1)
        theta = np.zeros(space.size)
        theta[1 : 1 + m] = 1.0
        return LinearOperator(theta, m, 1)
    if mode == "magnitude":
        return GradientMagnitudeOperator(m)
    raise ContractViolation(f"unknown edge mode {mode!r}")


def rotation_invariant_op(f, m: int = 2, order: int = 2) -> RadialOperator:
    return RadialOperator(f, m, order)


# ---------------------------------------------------------------------------
# lazy application
# ---------------------------------------------------------------------------


@dataclass
class ProcessedInr:
    """A network with an operator attached; evaluable anywhere, never
    materialized on a grid internally."""

    inr: SirenNetwork
    op: InspOperator
    composition_depth: int = 1
    jet_cap: int = DEFAULT_MAX_ORDER

    def eval_many(self, xs: np.ndarray) -> np.ndarray:
        stacks = jet_eval_many(self.inr, xs, self.op.order, max_order=self.jet_cap)
        return self.op.apply_batch(stacks)


def process(inr: SirenNetwork, op: InspOperator) -> ProcessedInr:
    if getattr(op, "m", None) != inr.input_dim:
        raise ContractViolation(
            f"operator dimension {getattr(op, 'm', None)} != network dimension {inr.input_dim}"
        )
    return ProcessedInr(inr, op)


def eval_processed(p: ProcessedInr, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return p.eval_many(x[None, :])[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class OperatorSpec:
    """What to train: variant, order, and fusion-MLP size."""

    variant: str = "fusion"  # "linear" or "fusion"
    order: int = 3
    hidden: tuple[int, ...] = (64, 64)
    feature_scale_base: float = DEFAULT_FEATURE_SCALE_BASE

    def __post_init__(self):
        if self.variant not in ("linear", "fusion"):
            raise ContractViolation(f"unknown operator variant {self.variant!r}")


@dataclass
class OperatorTrainConfig:
    steps: int = 3000
    batch_size: int = 1024
    lr: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.0


def precompute_stacks(
    inrs: list[SirenNetwork], lattices: list[np.ndarray], order: int
) -> list[np.ndarray]:
    """Stacks are independent of the operator parameters, so they are
    computed once per network and cached for the whole training run."""
    return [jet_eval_many(net, xs, order) for net, xs in zip(inrs, lattices)]


def train_operator(
    pairs: list[tuple[SirenNetwork, np.ndarray, np.ndarray]],
    spec: OperatorSpec,
    cfg: OperatorTrainConfig | None = None,
    stacks: list[np.ndarray] | None = None,
) -> tuple[InspOperator, list[float]]:
    """Fit operator parameters so the processed networks match targets.

    Each pair is (network, lattice (P, m), targets (P, c) in network
    value units).  Returns the operator and the per-step loss history.
    """
    cfg = cfg or OperatorTrainConfig()
    if not pairs:
        raise ContractViolation("training needs at least one pair")
    m = pairs[0][0].input_dim
    c = pairs[0][0].output_dim
    for net, xs, ts in pairs:
        if net.input_dim != m or net.output_dim != c:
            raise ContractViolation("all training networks must share input/output dims")
        if len(xs) != len(ts):
            raise ContractViolation("lattice and target lengths differ")

    if stacks is None:
        stacks = precompute_stacks([p[0] for p in pairs], [p[1] for p in pairs], spec.order)
    feats = np.concatenate([s.reshape(-1, s.shape[-1]) for s in stacks], axis=0)
    targets = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1, 1) for _, _, t in pairs], axis=0)
    scale = order_feature_scale(m, spec.order, spec.feature_scale_base)

    n = len(feats)
    scaled = feats * scale
    if spec.variant == "linear":
        params = {"theta": np.zeros((scaled.shape[1], 1))}
        def predict(p, f):
            return f @ p["theta"]
    else:
        mlp = build_fusion_mlp(scaled.shape[1], spec.hidden, 1, seed=cfg.seed, feature_scale=np.ones_like(scale))
        params = mlp.params()
        n_layers = len(mlp.weights)
        def predict(p, f):
            h = f
            for i in range(n_layers):
                h = h @ p[f"w{i}"] + p[f"b{i}"]
                if i < n_layers - 1:
                    h = np.maximum(h, 0.0)
            return h

    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[float] = []
    batch = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        if batch == n:
            fb, tb = scaled, targets
        else:
            idx = stream(cfg.seed, 31, step).integers(0, n, size=batch)
            fb, tb = scaled[idx], targets[idx]
        grads, loss = _regression_grads(params, predict, fb, tb, spec.variant)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite operator loss at step {step}")
        history.append(loss)
        params = adamw_step(params, grads, state)

    if spec.variant == "linear":
        theta = (params["theta"][:, 0] * scale).astype(np.float64)
        return LinearOperator(theta, m, spec.order), history
    mlp.set_params(params)
    mlp.feature_scale = scale
    return FusionMlpOperator(mlp, m, spec.order), history


def _regression_grads(params, predict, feats, targets, variant):
    if variant == "linear":
        pred = feats @ params["theta"]
        resid = pred - targets
        loss = float(np.mean(resid**2))
        grad = {"theta": 2.0 * feats.T @ resid / len(feats)}
        return grad, loss
    # fusion MLP: forward with cached activations, then reverse sweep
    n_layers = sum(1 for k in params if k.startswith("w"))
    hs = [feats]
    pres = []
    h = feats
    for i in range(n_layers):
        pre = h @ params[f"w{i}"] + params[f"b{i}"]
        pres.append(pre)
        h = np.maximum(pre, 0.0) if i < n_layers - 1 else pre
        hs.append(h)
    resid = hs[-1] - targets
    loss = float(np.mean(resid**2))
    delta = 2.0 * resid / len(feats)
    grads: dict[str, np.ndarray] = {}
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            delta = delta * (pres[i] > 0.0)
        grads[f"w{i}"] = hs[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params[f"w{i}"].T
    return grads, loss


# ---------------------------------------------------------------------------
# operator file format: magic, u16 version, u8 variant, u8 order, u8 m,
# u8 policy, variant payload, u32 CRC32
# ---------------------------------------------------------------------------

_VARIANT_TAGS = {"linear": 0, "fusion": 1, "gradmag": 2}
_TAG_VARIANTS = {v: k for k, v in _VARIANT_TAGS.items()}


def save_operator(op: InspOperator) -> bytes:
    if op.variant not in _VARIANT_TAGS:
        raise CapabilityError(f"operator variant {op.variant!r} has no file representation")
    head = bytearray()
    head += OP_MAGIC
    head += struct.pack("<H", OP_FORMAT_VERSION)
    head += struct.pack(
        "<BBBB", _VARIANT_TAGS[op.variant], op.order, op.m, 0 if op.shared else 1
    )
    payload = bytearray()
    if op.variant == "linear":
        theta = np.atleast_2d(op.theta)
        payload += struct.pack("<HH", theta.shape[0], theta.shape[1])
        payload += np.ascontiguousarray(theta, dtype="<f8").tobytes()
        payload += struct.pack("<B", 1 if op.theta.ndim == 1 else 2)
    elif op.variant == "fusion":
        mlp = op.mlp
        widths = [mlp.weights[0].shape[0]] + [w.shape[1] for w in mlp.weights]
        payload += struct.pack("<H", len(widths))
        payload += struct.pack(f"<{len(widths)}H", *widths)
        payload += np.ascontiguousarray(mlp.feature_scale, dtype="<f8").tobytes()
        for w, b in zip(mlp.weights, mlp.biases):
            payload += np.ascontiguousarray(w, dtype="<f8").tobytes()
            payload += np.ascontiguousarray(b, dtype="<f8").tobytes()
    body = bytes(head) + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def load_operator(data: bytes) -> InspOperator:
    if len(data) < 4 or data[:4] != OP_MAGIC:
        raise BadMagicError("not an operator file (bad magic)")
    if len(data) < 14:
        raise TruncatedFileError("file shorter than the fixed header")
    stored = struct.unpack("<I", data[-4:])[0]
    body = data[:-4]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError("checksum mismatch; file is corrupt or truncated")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != OP_FORMAT_VERSION:
        raise VersionError(f"unsupported operator format version {version}")
    tag, order, m, policy = struct.unpack_from("<BBBB", body, 6)
    off = 10
    variant = _TAG_VARIANTS.get(tag)
    if variant is None:
        raise VersionError(f"unknown operator variant tag {tag}")
    if variant == "gradmag":
        return GradientMagnitudeOperator(m)
    if variant == "linear":
        rows, cols = struct.unpack_from("<HH", body, off)
        off += 4
        count = rows * cols
        if len(body) < off + 8 * count + 1:
            raise TruncatedFileError("coefficient payload is shorter than declared")
        theta = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(rows, cols)
        off += 8 * count
        (ndim,) = struct.unpack_from("<B", body, off)
        return LinearOperator(theta[0] if ndim == 1 else theta.copy(), m, order, shared=policy == 0)
    # fusion
    (n_widths,) = struct.unpack_from("<H", body, off)
    off += 2
    widths = list(struct.unpack_from(f"<{n_widths}H", body, off))
    off += 2 * n_widths
    m_len = widths[0]
    need = m_len + sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(n_widths - 1))
    if len(body) != off + 8 * need:
        raise TruncatedFileError("fusion payload length disagrees with the declared widths")
    flat = np.frombuffer(body, dtype="<f8", count=need, offset=off)
    feature_scale = flat[:m_len].copy()
    pos = m_len
    weights, biases = [], []
    for i in range(n_widths - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    mlp = FusionMlp(weights, biases, feature_scale)
    return FusionMlpOperator(mlp, m, order, shared=policy == 0)
