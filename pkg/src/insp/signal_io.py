"""Bridge between continuous networks and discrete artifacts.

Grids hold samples in [0, 1] with an explicit domain map: sample j on
an axis of size s sits at coordinate -1 + 2j/(s-1).  Intensities map
to network values as v -> 2v - 1 and back at decode time.  Codecs are
binary PGM/PPM (maxval 255) and 16-bit PCM mono WAV; both reject
malformed input with typed errors rather than returning partial data.
"""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ContractViolation, HeaderParseError, TruncatedFileError
from .fitting import ConstraintSet
from .numerics import stream
from .siren import SirenNetwork, forward_many

__all__ = [
    "SignalGrid",
    "lattice_coords",
    "decode",
    "to_constraints",
    "load_pgm",
    "save_pgm",
    "load_ppm",
    "save_ppm",
    "load_image",
    "save_image",
    "load_wav",
    "save_wav",
    "add_gaussian_noise",
    "mask_pixels",
    "overlay_text_mask",
    "gaussian_blur_reference",
    "sobel_magnitude",
    "box_downsample",
    "psnr",
    "ssim",
    "pearson",
]


@dataclass
class SignalGrid:
    """Discrete m-dimensional signal; samples shaped (*spatial, channels)."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim - 1 not in (1, 2):
            raise ContractViolation(
                f"grids are 1-D or 2-D signals with a channel axis, got shape {self.samples.shape}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ContractViolation("grid samples must be finite")
        if min(self.samples.shape[:-1]) < 2:
            raise ContractViolation("each spatial axis needs at least 2 samples")

    @property
    def m(self) -> int:
        return self.samples.ndim - 1

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.samples.shape[:-1]

    @property
    def channels(self) -> int:
        return self.samples.shape[-1]

    def clamped(self) -> np.ndarray:
        return np.clip(self.samples, 0.0, 1.0)


def lattice_coords(shape: tuple[int, ...]) -> np.ndarray:
    """Row-major lattice of coordinates in [-1, 1]^m, shape (P, m)."""
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=-1)


def to_constraints(grid: SignalGrid) -> ConstraintSet:
    """Point constraints with intensities mapped to network range [-1, 1]."""
    coords = lattice_coords(grid.spatial_shape)
    targets = grid.samples.reshape(-1, grid.channels) * 2.0 - 1.0
    return ConstraintSet(coords, targets)


def decode(source, shape: tuple[int, ...] | int) -> SignalGrid:
    """Evaluate a network (or processed network) on a lattice and map
    values back to [0, 1]."""
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if min(shape) < 2:
        raise ContractViolation(f"decode shape must be >= 2 per axis, got {shape}")
    coords = lattice_coords(shape)
    if isinstance(source, SirenNetwork):
        values = forward_many(source, coords)
    elif hasattr(source, "eval_many"):
        values = source.eval_many(coords)
    else:
        raise ContractViolation(f"cannot decode object of type {type(source).__name__}")
    values = (values + 1.0) / 2.0
    values = np.clip(values, 0.0, 1.0)
    return SignalGrid(values.reshape(*shape, -1))


# ---------------------------------------------------------------------------
# netpbm codecs (binary P5 / P6, maxval 255)
# ---------------------------------------------------------------------------


def _read_pnm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read whitespace-separated integer tokens, skipping # comments.
    Returns the tokens and the offset one byte past the final separator."""
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise HeaderParseError("header ended before all fields were read")
        ch = data[pos]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == ord("#"):
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise HeaderParseError("unterminated comment in header")
            pos = nl + 1
        elif ord("0") <= ch <= ord("9"):
            start = pos
            while pos < len(data) and ord("0") <= data[pos] <= ord("9"):
                pos += 1
            tokens.append(int(data[start:pos]))
            if pos >= len(data):
                raise HeaderParseError("header ended without a payload separator")
            if data[pos] == ord("#"):
                continue
            pos += 1  # single whitespace byte before the next token/payload
        else:
            raise HeaderParseError(f"unexpected byte {ch:#x} in header")
    return tokens, pos


def _load_pnm(data: bytes, magic: bytes, channels: int) -> SignalGrid:
    if data[:2] != magic:
        raise HeaderParseError(f"expected {magic.decode()} image, got {data[:2]!r}")
    (width, height, maxval), pos = _read_pnm_tokens(data[2:], 3)
    pos += 2
    if maxval != 255:
        raise CapabilityError(f"only maxval 255 is supported, got {maxval}")
    n = width * height * channels
    payload = data[pos : pos + n]
    if len(payload) < n:
        raise TruncatedFileError(f"pixel payload holds {len(payload)} of {n} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return SignalGrid(arr.reshape(height, width, channels))


def _save_pnm(grid: SignalGrid, magic: bytes, channels: int) -> bytes:
    if grid.m != 2 or grid.channels != channels:
        raise ContractViolation(
            f"{magic.decode()} wants a 2-D grid with {channels} channel(s), "
            f"got shape {grid.samples.shape}"
        )
    h, w = grid.spatial_shape
    quantized = np.clip(np.rint(grid.clamped() * 255.0), 0, 255).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode() + quantized.tobytes()


def load_pgm(data: bytes) -> SignalGrid:
    return _load_pnm(data, b"P5", 1)


def save_pgm(grid: SignalGrid) -> bytes:
    return _save_pnm(grid, b"P5", 1)


def load_ppm(data: bytes) -> SignalGrid:
    return _load_pnm(data, b"P6", 3)


def save_ppm(grid: SignalGrid) -> bytes:
    return _save_pnm(grid, b"P6", 3)


def load_image(data: bytes) -> SignalGrid:
    """Dispatch on the magic: P5 grayscale or P6 RGB."""
    if data[:2] == b"P5":
        return load_pgm(data)
    if data[:2] == b"P6":
        return load_ppm(data)
    raise HeaderParseError(f"unknown image magic {data[:2]!r}")


def save_image(grid: SignalGrid) -> bytes:
    if grid.channels == 1:
        return save_pgm(grid)
    if grid.channels == 3:
        return save_ppm(grid)
    raise ContractViolation(f"images are 1- or 3-channel, got {grid.channels}")


# ---------------------------------------------------------------------------
# WAV (16-bit PCM mono)
# ---------------------------------------------------------------------------


def load_wav(data: bytes) -> tuple[SignalGrid, int]:
    """Returns the grid (samples mapped to [0, 1]) and the sample rate."""
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise CapabilityError(f"compressed WAV ({wf.getcomptype()}) is not supported")
            if wf.getnchannels() != 1:
                raise CapabilityError(f"only mono WAV is supported, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise CapabilityError(f"only 16-bit PCM is supported, got {8 * wf.getsampwidth()} bits")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise HeaderParseError(f"not a readable WAV file: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return SignalGrid(((pcm / 32768.0 + 1.0) / 2.0)[:, None]), rate


def save_wav(grid: SignalGrid, rate: int = 8000) -> bytes:
    if grid.m != 1 or grid.channels != 1:
        raise ContractViolation(f"WAV wants a 1-D mono grid, got shape {grid.samples.shape}")
    v = grid.clamped()[:, 0]
    pcm = np.clip(np.rint((v * 2.0 - 1.0) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(rate))
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# corruption synthesis and reference filters
# ---------------------------------------------------------------------------


def add_gaussian_noise(grid: SignalGrid, sigma: float, seed: int) -> SignalGrid:
    if sigma < 0:
        raise ContractViolation(f"noise sigma must be >= 0, got {sigma}")
    noise = stream(seed, 10).normal(0.0, sigma, size=grid.samples.shape) if sigma > 0 else 0.0
    return SignalGrid(np.clip(grid.samples + noise, 0.0, 1.0))


def mask_pixels(grid: SignalGrid, fraction: float, seed: int, fill: float = 0.0) -> SignalGrid:
    if not 0.0 <= fraction <= 1.0:
        raise ContractViolation(f"mask fraction must be in [0, 1], got {fraction}")
    npix = int(np.prod(grid.spatial_shape))
    k = int(round(fraction * npix))
    flat = grid.samples.reshape(npix, grid.channels).copy()
    chosen = stream(seed, 11).permutation(npix)[:k]
    flat[chosen] = fill
    return SignalGrid(flat.reshape(grid.samples.shape))


def overlay_text_mask(grid: SignalGrid, mask: SignalGrid) -> SignalGrid:
    """Replace pixels wherever the mask is nonzero with the mask's own
    values (e.g. white rendered text)."""
    if mask.spatial_shape != grid.spatial_shape:
        raise ContractViolation(
            f"mask shape {mask.spatial_shape} != grid shape {grid.spatial_shape}"
        )
    m = mask.samples
    if m.shape[-1] == 1 and grid.channels > 1:
        m = np.repeat(m, grid.channels, axis=-1)
    return SignalGrid(np.where(m > 0.0, m, grid.samples))


def _gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur_reference(grid: SignalGrid, sigma_px: float) -> SignalGrid:
    """Separable discrete Gaussian truncated at 3 sigma, reflective
    (edge-repeating) boundary."""
    if sigma_px < 0:
        raise ContractViolation(f"blur sigma must be >= 0, got {sigma_px}")
    if sigma_px == 0:
        return SignalGrid(grid.samples.copy())
    k = _gaussian_kernel_1d(sigma_px)
    r = (len(k) - 1) // 2
    out = grid.samples
    for axis in range(grid.m):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for t in range(len(k)):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(t, t + out.shape[axis])
            acc += k[t] * padded[tuple(sl)]
        out = acc
    return SignalGrid(out)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_magnitude(grid: SignalGrid) -> SignalGrid:
    """l2 magnitude of the standard 3x3 pair, scaled by 1/(4*sqrt(2))
    so samples stay within [0, 1]."""
    if grid.m != 2:
        raise ContractViolation("the 3x3 filter pair is defined for 2-D grids")
    padded = np.pad(grid.samples, ((1, 1), (1, 1), (0, 0)), mode="symmetric")
    gx = np.zeros_like(grid.samples)
    gy = np.zeros_like(grid.samples)
    h, w = grid.spatial_shape
    for i in range(3):
        for j in range(3):
            window = padded[i : i + h, j : j + w, :]
            gx += _SOBEL_X[i, j] * window
            gy += _SOBEL_X[j, i] * window
    mag = np.sqrt(gx * gx + gy * gy) / (4.0 * np.sqrt(2.0))
    return SignalGrid(mag)


def box_downsample(grid: SignalGrid, factor: int) -> SignalGrid:
    """Average non-overlapping blocks; spatial sizes must divide evenly."""
    if factor < 1:
        raise ContractViolation(f"factor must be >= 1, got {factor}")
    s = grid.samples
    for size in grid.spatial_shape:
        if size % factor:
            raise ContractViolation(f"axis size {size} not divisible by {factor}")
    if grid.m == 1:
        n = grid.spatial_shape[0] // factor
        return SignalGrid(s.reshape(n, factor, -1).mean(axis=1))
    h, w = (grid.spatial_shape[0] // factor, grid.spatial_shape[1] // factor)
    return SignalGrid(s.reshape(h, factor, w, factor, -1).mean(axis=(1, 3)))


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def _check_pair(a: SignalGrid, b: SignalGrid) -> None:
    if a.samples.shape != b.samples.shape:
        raise ContractViolation(
            f"grid shapes differ: {a.samples.shape} vs {b.samples.shape}"
        )


def psnr(a: SignalGrid, b: SignalGrid) -> float:
    """10 log10(1 / MSE) for [0, 1] grids; +inf when identical."""
    _check_pair(a, b)
    mse = float(np.mean((a.samples - b.samples) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _window_stats(x: np.ndarray, win: int):
    view = np.lib.stride_tricks.sliding_window_view(x, (win,) * (x.ndim))
    axes = tuple(range(x.ndim, 2 * x.ndim))
    return view, axes


def ssim(a: SignalGrid, b: SignalGrid, win: int = 8) -> float:
    """Mean structural similarity over sliding uniform windows and
    channels, with C1 = 0.01^2 and C2 = 0.03^2."""
    _check_pair(a, b)
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for ch in range(a.channels):
        x = a.samples[..., ch]
        y = b.samples[..., ch]
        w = min(win, *x.shape)
        vx, axes = _window_stats(x, w)
        vy, _ = _window_stats(y, w)
        mx = vx.mean(axis=axes)
        my = vy.mean(axis=axes)
        varx = (vx * vx).mean(axis=axes) - mx * mx
        vary = (vy * vy).mean(axis=axes) - my * my
        cov = (vx * vy).mean(axis=axes) - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (varx + vary + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equally shaped sample arrays."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractViolation(f"correlation inputs differ in size: {x.shape} vs {y.shape}")
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0.0:
        return 0.0
    return float((x * y).sum() / denom)