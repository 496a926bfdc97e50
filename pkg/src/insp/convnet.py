"""Stacked derivative-stack layers running directly on a network.

Per layer: a shared coefficient vector combines each channel's
derivative stack (depthwise), a dense matrix mixes channels, instance
normalization standardizes each channel over the evaluation lattice,
and ReLU clips.  Layer l+1 needs derivatives of layer l's output, so
the forward pass propagates jets of the base network through every
operation: the depthwise step reads derivative jets out of higher-order
jets, mixing and normalization act linearly on coefficients (lattice
statistics are constants with respect to the coordinate), and ReLU
multiplies the jet by the value's sign indicator.

Parameter gradients run a reverse sweep over the same graph; the input
network's parameters are frozen by construction since its jets enter as
constants.  Normalization statistics do receive adjoints in parameter
backprop, unlike in coordinate differentiation; the asymmetry is
deliberate and noted in the training history header.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

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
    derivative_shift_tables,
    jet_space,
    siren_jet_coeffs,
)
from .numerics import OptimizerState, adamw_step, stream
from .siren import SirenNetwork, linear_reparam, shift_input

__all__ = [
    "LayerSpec",
    "ConvNetSpec",
    "init_convnet_params",
    "base_jets",
    "convnet_forward",
    "convnet_grads",
    "cross_entropy",
    "ForwardTrace",
    "augment",
    "augment_siren",
    "ConvNetTrainConfig",
    "train_convnet",
    "evaluate_accuracy",
    "save_convnet",
    "load_convnet",
    "CONVNET_MAGIC",
]

CONVNET_MAGIC = b"INSC"
CONVNET_FORMAT_VERSION = 1

THETA_INIT_BASE = 0.05  # per-order coefficient scale at init


@dataclass(frozen=True)
class LayerSpec:
    order: int = 2
    out_channels: int = 16
    norm: bool = True
    activation: str = "relu"  # or "identity"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.order < 0:
            raise ContractViolation("layer order must be >= 0")


@dataclass(frozen=True)
class ConvNetSpec:
    m: int = 2
    in_channels: int = 1
    layers: tuple[LayerSpec, ...] = (LayerSpec(), LayerSpec())
    n_classes: int = 10
    pool_shape: tuple[int, ...] = (14, 14)
    norm_eps: float = 1e-9
    jet_cap: int = DEFAULT_MAX_ORDER

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ContractViolation("need at least one layer")
        if self.total_order > self.jet_cap:
            raise CapabilityError(
                f"stacked orders sum to {self.total_order}, beyond the derivative cap "
                f"{self.jet_cap}"
            )

    @property
    def total_order(self) -> int:
        return sum(l.order for l in self.layers)

    @property
    def channel_chain(self) -> list[int]:
        return [self.in_channels] + [l.out_channels for l in self.layers]

    def remaining_orders(self) -> list[int]:
        """Jet order carried into each layer (and past it)."""
        rem = [self.total_order]
        for l in self.layers:
            rem.append(rem[-1] - l.order)
        return rem


def init_convnet_params(spec: ConvNetSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Depthwise coefficients start near the identity with per-order
    decay; mixing is uniform Kaiming-style; the head starts at zero so
    the initial softmax is uniform."""
    params: dict[str, np.ndarray] = {}
    chain = spec.channel_chain
    for l, layer in enumerate(spec.layers):
        space = jet_space(spec.m, layer.order)
        decay = THETA_INIT_BASE ** space.totals.astype(np.float64)
        theta = stream(seed, 40, l).uniform(-1.0, 1.0, size=space.size) * decay
        theta[0] += 1.0
        params[f"theta{l}"] = theta
        fan_in = chain[l]
        bound = np.sqrt(6.0 / fan_in)
        params[f"mix{l}"] = stream(seed, 41, l).uniform(-bound, bound, size=(fan_in, chain[l + 1]))
        params[f"mixb{l}"] = np.zeros(chain[l + 1])
    params["head_w"] = np.zeros((chain[-1], spec.n_classes))
    params["head_b"] = np.zeros(spec.n_classes)
    return params


def base_jets(inr: SirenNetwork, lattice: np.ndarray, spec: ConvNetSpec) -> np.ndarray:
    """Jets of the input network at the lattice, to the order the whole
    stack needs: (P, C0, M_total).  Independent of every trainable
    parameter, so callers cache them."""
    if inr.input_dim != spec.m or inr.output_dim != spec.in_channels:
        raise ContractViolation(
            f"network ({inr.input_dim}->{inr.output_dim}) does not match the spec "
            f"({spec.m}->{spec.in_channels})"
        )
    coeffs = siren_jet_coeffs(inr, lattice, spec.total_order, max_order=spec.jet_cap)
    return np.ascontiguousarray(coeffs.transpose(0, 2, 1))  # (P, C0, M)


@dataclass
class ForwardTrace:
    """Everything the backward sweep and the oracle tests need."""

    logits: np.ndarray  # (B, n_classes)
    pooled: np.ndarray  # (B, C_L)
    point_values: np.ndarray  # (B, P, C_L)
    layer_inputs: list[np.ndarray]  # jets entering each layer
    pre_norm: list[np.ndarray]
    post_norm: list[np.ndarray]
    post_act: list[np.ndarray]
    norm_stats: list[tuple[np.ndarray, np.ndarray]]  # (mu, inv_std) per layer


def _layer_tables(spec: ConvNetSpec):
    rem = spec.remaining_orders()
    tables = []
    for l, layer in enumerate(spec.layers):
        base = jet_space(spec.m, rem[l])
        sub = jet_space(spec.m, layer.order)
        out = jet_space(spec.m, rem[l + 1])
        tables.append(derivative_shift_tables(base, sub, out))
    return tables


def convnet_forward(
    params: dict[str, np.ndarray],
    spec: ConvNetSpec,
    jets: np.ndarray,
) -> ForwardTrace:
    """Forward pass on precomputed base jets (B, P, C0, M_total)."""
    if jets.ndim == 3:
        jets = jets[None]
    tables = _layer_tables(spec)
    cur = jets
    layer_inputs, pre_norm, post_norm, post_act, stats = [], [], [], [], []
    for l, layer in enumerate(spec.layers):
        src, fac = tables[l]
        layer_inputs.append(cur)
        theta = params[f"theta{l}"]
        m_out = src.shape[1]
        depth = np.zeros(cur.shape[:3] + (m_out,))
        for k in range(src.shape[0]):
            depth += theta[k] * (cur[..., src[k]] * fac[k])
        mixed = np.einsum("bpcr,cd->bpdr", depth, params[f"mix{l}"], optimize=True)
        mixed[..., 0] += params[f"mixb{l}"]
        pre_norm.append(mixed)
        if layer.norm:
            v = mixed[..., 0]
            mu = v.mean(axis=1, keepdims=True)
            var = ((v - mu) ** 2).mean(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + spec.norm_eps)
            normed = mixed * inv[..., None]
            normed[..., 0] -= mu * inv
            stats.append((mu, inv))
        else:
            normed = mixed
            stats.append((None, None))
        post_norm.append(normed)
        if layer.activation == "relu":
            ind = (normed[..., 0] > 0.0).astype(np.float64)
            acted = normed * ind[..., None]
        else:
            acted = normed
        post_act.append(acted)
        cur = acted
    point_values = cur[..., 0]
    pooled = point_values.mean(axis=1)
    logits = pooled @ params["head_w"] + params["head_b"]
    return ForwardTrace(
        logits=logits,
        pooled=pooled,
        point_values=point_values,
        layer_inputs=layer_inputs,
        pre_norm=pre_norm,
        post_norm=post_norm,
        post_act=post_act,
        norm_stats=stats,
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    probs = _softmax(logits)
    n = len(labels)
    return float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))


def convnet_grads(
    params: dict[str, np.ndarray],
    spec: ConvNetSpec,
    jets: np.ndarray,
    labels: np.ndarray,
) -> tuple[dict[str, np.ndarray], float, ForwardTrace]:
    """Cross-entropy gradients for every trainable parameter.

    The base network's jets are leaves of the graph: no gradient exists
    with respect to them, so the input networks cannot drift.
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= spec.n_classes:
        raise ContractViolation("labels must be valid class indices")
    trace = convnet_forward(params, spec, jets)
    b, p = trace.point_values.shape[:2]
    probs = _softmax(trace.logits)
    loss = cross_entropy(trace.logits, labels)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite classification loss")

    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b

    grads: dict[str, np.ndarray] = {
        "head_w": trace.pooled.T @ dlogits,
        "head_b": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ params["head_w"].T
    dvalues = np.repeat(dpooled[:, None, :], p, axis=1) / p

    tables = _layer_tables(spec)
    dcur = dvalues[..., None]  # adjoint of the last layer's jets (M=1)
    for l in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[l]
        if layer.activation == "relu":
            ind = (trace.post_norm[l][..., 0] > 0.0).astype(np.float64)
            dnormed = dcur * ind[..., None]
        else:
            dnormed = dcur
        mu, inv = trace.norm_stats[l]
        if layer.norm:
            mixed = trace.pre_norm[l]
            centered = mixed.copy()
            centered[..., 0] -= mu
            # adjoint through z = centered * inv with lattice statistics
            s_tot = np.einsum("bpdr,bpdr->bd", dnormed, centered)[:, None, :]
            g0_sum = dnormed[..., 0].sum(axis=1, keepdims=True)
            dmixed = dnormed * inv[..., None]
            dmixed[..., 0] += (
                -0.5 * inv**3 * s_tot * 2.0 * centered[..., 0] / p - inv * g0_sum / p
            )
        else:
            dmixed = dnormed
        grads[f"mixb{l}"] = dmixed[..., 0].sum(axis=(0, 1))
        # recompute the depthwise output rather than storing it
        src, fac = tables[l]
        theta = params[f"theta{l}"]
        cur_in = trace.layer_inputs[l]
        depth = np.zeros(cur_in.shape[:3] + (src.shape[1],))
        for k in range(src.shape[0]):
            depth += theta[k] * (cur_in[..., src[k]] * fac[k])
        grads[f"mix{l}"] = np.einsum("bpcr,bpdr->cd", depth, dmixed, optimize=True)
        ddepth = np.einsum("bpdr,cd->bpcr", dmixed, params[f"mix{l}"], optimize=True)
        dtheta = np.zeros_like(theta)
        for k in range(src.shape[0]):
            dtheta[k] = np.einsum("bpcr,bpcr->", cur_in[..., src[k]] * fac[k], ddepth)
        grads[f"theta{l}"] = dtheta
        if l > 0:
            dprev = np.zeros_like(cur_in)
            for k in range(src.shape[0]):
                dprev[..., src[k]] += theta[k] * fac[k] * ddepth
            dcur = dprev
    return grads, loss, trace


# ---------------------------------------------------------------------------
# coordinate-affine augmentation
# ---------------------------------------------------------------------------


def augment_siren(net: SirenNetwork, r: np.ndarray, t: np.ndarray) -> SirenNetwork:
    """Exact first-layer reparameterization of x -> net(R x + t)."""
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if r.shape != (net.input_dim, net.input_dim):
        raise ContractViolation(f"R must be ({net.input_dim}, {net.input_dim})")
    if abs(np.linalg.det(r)) < 1e-12:
        raise ContractViolation("affine matrix is singular")
    w0 = r.T @ net.weights[0]
    b0 = net.biases[0] + t @ net.weights[0]
    return replace(net, weights=(w0,) + net.weights[1:], biases=(b0,) + net.biases[1:])


def augment(inr_eval, affine: tuple[np.ndarray, np.ndarray]):
    """Point-evaluable computing x -> eval(R x + t); networks get the
    exact reparameterization, anything else a closure."""
    r, t = affine
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if abs(np.linalg.det(r)) < 1e-12:
        raise ContractViolation("affine matrix is singular")
    if isinstance(inr_eval, SirenNetwork):
        return augment_siren(inr_eval, r, t)

    def transformed(xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        return inr_eval(xs @ r.T + t)

    return transformed


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ConvNetTrainConfig:
    epochs: int = 200
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.0
    eval_every: int = 10


def evaluate_accuracy(
    params: dict[str, np.ndarray],
    spec: ConvNetSpec,
    jets: np.ndarray,
    labels: np.ndarray,
    batch: int = 200,
) -> float:
    hits = 0
    for i in range(0, len(labels), batch):
        trace = convnet_forward(params, spec, jets[i : i + batch])
        hits += int(np.sum(trace.logits.argmax(axis=1) == labels[i : i + batch]))
    return hits / len(labels)


def train_convnet(
    train_jets: np.ndarray,
    train_labels: np.ndarray,
    spec: ConvNetSpec,
    cfg: ConvNetTrainConfig | None = None,
    test_jets: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
    log=None,
) -> tuple[dict[str, np.ndarray], list[tuple[int, float, float, float]]]:
    """Minibatch AdamW over cached base jets; returns parameters and a
    history of (epoch, train_loss, train_acc, test_acc) rows."""
    cfg = cfg or ConvNetTrainConfig()
    n = len(train_labels)
    train_labels = np.asarray(train_labels)
    params = init_convnet_params(spec, seed=cfg.seed)
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[tuple[int, float, float, float]] = []
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, 42, epoch).permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            grads, loss, _ = convnet_grads(params, spec, train_jets[idx], train_labels[idx])
            params = adamw_step(params, grads, state)
            losses.append(loss)
        if epoch % cfg.eval_every == cfg.eval_every - 1 or epoch == cfg.epochs - 1:
            train_acc = evaluate_accuracy(params, spec, train_jets, train_labels)
            test_acc = (
                evaluate_accuracy(params, spec, test_jets, test_labels)
                if test_jets is not None
                else float("nan")
            )
            row = (epoch + 1, float(np.mean(losses)), train_acc, test_acc)
            history.append(row)
            if log is not None:
                log(row)
    return params, history


# ---------------------------------------------------------------------------
# parameter file: magic, u16 version, spec header, f64 payload, u32 CRC32
# ---------------------------------------------------------------------------


def save_convnet(params: dict[str, np.ndarray], spec: ConvNetSpec) -> bytes:
    head = bytearray()
    head += CONVNET_MAGIC
    head += struct.pack("<H", CONVNET_FORMAT_VERSION)
    head += struct.pack("<BBH", spec.m, spec.in_channels, spec.n_classes)
    head += struct.pack("<B", len(spec.layers))
    for l in spec.layers:
        head += struct.pack(
            "<BHBB", l.order, l.out_channels, 1 if l.norm else 0, 1 if l.activation == "relu" else 0
        )
    head += struct.pack("<B", len(spec.pool_shape))
    head += struct.pack(f"<{len(spec.pool_shape)}H", *spec.pool_shape)
    head += struct.pack("<dB", spec.norm_eps, spec.jet_cap)
    payload = bytearray()
    for key in _param_order(spec):
        payload += np.ascontiguousarray(params[key], dtype="<f8").tobytes()
    body = bytes(head) + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _param_order(spec: ConvNetSpec) -> list[str]:
    keys = []
    for l in range(len(spec.layers)):
        keys += [f"theta{l}", f"mix{l}", f"mixb{l}"]
    keys += ["head_w", "head_b"]
    return keys


def _param_shapes(spec: ConvNetSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    chain = spec.channel_chain
    for l, layer in enumerate(spec.layers):
        shapes[f"theta{l}"] = (jet_space(spec.m, layer.order).size,)
        shapes[f"mix{l}"] = (chain[l], chain[l + 1])
        shapes[f"mixb{l}"] = (chain[l + 1],)
    shapes["head_w"] = (chain[-1], spec.n_classes)
    shapes["head_b"] = (spec.n_classes,)
    return shapes


def load_convnet(data: bytes) -> tuple[dict[str, np.ndarray], ConvNetSpec]:
    if len(data) < 4 or data[:4] != CONVNET_MAGIC:
        raise BadMagicError("not a stacked-operator parameter file (bad magic)")
    stored = struct.unpack("<I", data[-4:])[0]
    body = data[:-4]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError("checksum mismatch; file is corrupt or truncated")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != CONVNET_FORMAT_VERSION:
        raise VersionError(f"unsupported parameter format version {version}")
    m, in_ch, n_classes = struct.unpack_from("<BBH", body, off)
    off += 4
    (n_layers,) = struct.unpack_from("<B", body, off)
    off += 1
    layers = []
    for _ in range(n_layers):
        order, out_ch, norm, relu = struct.unpack_from("<BHBB", body, off)
        off += 5
        layers.append(
            LayerSpec(order, out_ch, bool(norm), "relu" if relu else "identity")
        )
    (pool_nd,) = struct.unpack_from("<B", body, off)
    off += 1
    pool = struct.unpack_from(f"<{pool_nd}H", body, off)
    off += 2 * pool_nd
    eps, cap = struct.unpack_from("<dB", body, off)
    off += 9
    spec = ConvNetSpec(m, in_ch, tuple(layers), n_classes, tuple(pool), eps, cap)
    shapes = _param_shapes(spec)
    count = sum(int(np.prod(s)) for s in shapes.values())
    if len(body) != off + 8 * count:
        raise TruncatedFileError(
            f"parameter payload length {len(body) - off} != expected {8 * count}"
        )
    flat = np.frombuffer(body, dtype="<f8", count=count, offset=off)
    params = {}
    pos = 0
    for key in _param_order(spec):
        shape = shapes[key]
        size = int(np.prod(shape))
        params[key] = flat[pos : pos + size].reshape(shape).copy()
        pos += size
    return params, spec
