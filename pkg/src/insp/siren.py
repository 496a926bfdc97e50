"""Sinusoidal coordinate networks and their on-disk format.

A network maps coordinates in [-1, 1]^m to c output channels through a
stack of affine layers with sine activations; only the first layer's
sine argument is scaled by the frequency factor omega0, and the final
layer is a plain affine map.  Weights are stored (fan_in, fan_out) so a
batch of row coordinates forwards as ``x @ W + b``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ContractViolation,
    TruncatedFileError,
    VersionError,
)
from .numerics import stream

__all__ = [
    "SirenNetwork",
    "build_siren",
    "forward",
    "forward_many",
    "shift_input",
    "linear_reparam",
    "save_inr",
    "load_inr",
]

MAGIC = b"INSP"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SirenNetwork:
    """Immutable parameter container for one coordinate network."""

    input_dim: int
    output_dim: int
    omega0: float
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.omega0 <= 0:
            raise ContractViolation(f"omega0 must be positive, got {self.omega0}")
        if len(self.weights) != len(self.biases) or len(self.weights) < 1:
            raise ContractViolation("weights and biases must pair up, one per layer")
        prev = self.input_dim
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (prev, b.shape[0]):
                raise ContractViolation(
                    f"layer {i}: weight {w.shape} does not chain from width {prev}"
                )
            prev = w.shape[1]
        if prev != self.output_dim:
            raise ContractViolation(
                f"final layer width {prev} != output_dim {self.output_dim}"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractViolation(f"layer {i} holds non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def params(self) -> dict[str, np.ndarray]:
        """Named copy of all parameters, for optimizers."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w.copy()
            out[f"b{i}"] = b.copy()
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "SirenNetwork":
        ws = tuple(np.asarray(params[f"w{i}"], dtype=np.float64) for i in range(self.n_layers))
        bs = tuple(np.asarray(params[f"b{i}"], dtype=np.float64) for i in range(self.n_layers))
        return replace(self, weights=ws, biases=bs)


def build_siren(
    m: int,
    c: int,
    hidden: list[int] | tuple[int, ...],
    omega0: float = 30.0,
    seed: int = 0,
) -> SirenNetwork:
    """Build and initialize a network with the standard sine-layer scheme.

    First-layer weights are uniform in (-1/m, 1/m); deeper layers are
    uniform in (-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0).  Biases
    start at zero.
    """
    if m < 1 or c < 1:
        raise ContractViolation(f"need m >= 1 and c >= 1, got m={m}, c={c}")
    hidden = list(hidden)
    if not hidden:
        raise ContractViolation("at least one hidden layer is required")
    widths = [m] + hidden + [c]
    weights = []
    biases = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if i == 0:
            bound = 1.0 / m
        else:
            bound = np.sqrt(6.0 / fan_in) / omega0
        rng = stream(seed, 0, i)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return SirenNetwork(m, c, float(omega0), tuple(weights), tuple(biases))


def forward_many(net: SirenNetwork, xs: np.ndarray) -> np.ndarray:
    """Evaluate at a batch of coordinates, shape (n, m) -> (n, c)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != net.input_dim:
        raise ContractViolation(
            f"coordinates must have shape (n, {net.input_dim}), got {xs.shape}"
        )
    h = xs
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            scale = net.omega0 if i == 0 else 1.0
            h = np.sin(scale * h)
    return h


def forward(net: SirenNetwork, x: np.ndarray) -> np.ndarray:
    """Evaluate at one coordinate, shape (m,) -> (c,).  Pure function."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ContractViolation(f"expected coordinate of shape ({net.input_dim},), got {x.shape}")
    return forward_many(net, x[None, :])[0]


def shift_input(net: SirenNetwork, v: np.ndarray) -> SirenNetwork:
    """Network computing x -> net(x + v), realized in the first-layer bias."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.input_dim,):
        raise ContractViolation(f"shift must have shape ({net.input_dim},), got {v.shape}")
    b0 = net.biases[0] + v @ net.weights[0]
    return replace(net, biases=(b0,) + net.biases[1:])


def linear_reparam(net: SirenNetwork, a: np.ndarray) -> SirenNetwork:
    """Network computing x -> net(A x), realized in the first-layer weight."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (net.input_dim, net.input_dim):
        raise ContractViolation(
            f"matrix must have shape ({net.input_dim}, {net.input_dim}), got {a.shape}"
        )
    w0 = a.T @ net.weights[0]
    return replace(net, weights=(w0,) + net.weights[1:])


# ---------------------------------------------------------------------------
# file format: magic, u16 version, u8 m, u8 c, u16 layer count, u16 widths,
# f64 omega0, f64 parameters (per layer: weight row-major, then bias),
# u32 CRC32 of all preceding bytes.  Little-endian throughout.
# ---------------------------------------------------------------------------


def save_inr(net: SirenNetwork) -> bytes:
    widths = [w.shape[1] for w in net.weights]
    head = bytearray()
    head += MAGIC
    head += struct.pack("<H", FORMAT_VERSION)
    head += struct.pack("<BB", net.input_dim, net.output_dim)
    head += struct.pack("<H", len(widths))
    head += struct.pack(f"<{len(widths)}H", *widths)
    head += struct.pack("<d", net.omega0)
    payload = bytearray()
    for w, b in zip(net.weights, net.biases):
        payload += np.ascontiguousarray(w, dtype="<f8").tobytes()
        payload += np.ascontiguousarray(b, dtype="<f8").tobytes()
    body = bytes(head) + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def load_inr(data: bytes) -> SirenNetwork:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a network file (bad magic)")
    if len(data) < 4 + 2 + 2 + 2 + 4:
        raise TruncatedFileError("file shorter than the fixed header")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    body = data[:-4]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("checksum mismatch; file is corrupt or truncated")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}")
    m, c = struct.unpack_from("<BB", body, off)
    off += 2
    (n_layers,) = struct.unpack_from("<H", body, off)
    off += 2
    if len(body) < off + 2 * n_layers + 8:
        raise TruncatedFileError("header declares more layers than the file holds")
    widths = list(struct.unpack_from(f"<{n_layers}H", body, off))
    off += 2 * n_layers
    (omega0,) = struct.unpack_from("<d", body, off)
    off += 8

    dims = [m] + widths
    n_params = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(n_layers))
    expected = off + 8 * n_params
    if len(body) != expected:
        raise TruncatedFileError(
            f"parameter payload length {len(body) - off} != expected {8 * n_params}"
        )
    flat = np.frombuffer(body, dtype="<f8", count=n_params, offset=off)
    weights = []
    biases = []
    pos = 0
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    if widths and widths[-1] != c:
        raise TruncatedFileError(f"final width {widths[-1]} disagrees with channel count {c}")
    return SirenNetwork(m, c, float(omega0), tuple(weights), tuple(biases))
