"""Deterministic offline test data: smooth desk images, a procedural
ten-class digit set, and accessors for the bundled assets.

Everything derives from explicit seeds so dataset builds are
byte-reproducible; no network access or external corpora are involved.
Run ``python3 -m insp.datasets --help`` to materialize a digit set with
its manifest files.
"""

from __future__ import annotations

import argparse
from importlib import resources
from pathlib import Path

import numpy as np

from .numerics import stream
from .signal_io import SignalGrid, gaussian_blur_reference, save_pgm

__all__ = [
    "desk_image",
    "desk_image_set",
    "render_digit",
    "digit_dataset",
    "render_text_mask",
    "bundled_image",
    "bundled_wav_bytes",
    "bundled_asset_path",
    "write_digit_dataset",
]

# 5x7 pixel glyphs for the ten digits
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(d: int) -> np.ndarray:
    rows = _GLYPHS[d]
    return np.array([[float(c) for c in row] for row in rows])


def _bilinear(img: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    """Sample img at fractional (row, col) positions, zero outside."""
    h, w = img.shape
    r0 = np.floor(rr).astype(int)
    c0 = np.floor(cc).astype(int)
    fr = rr - r0
    fc = cc - c0
    out = np.zeros_like(rr)
    for dr in (0, 1):
        for dc in (0, 1):
            ri = r0 + dr
            ci = c0 + dc
            inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            weight = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
            vals = np.zeros_like(rr)
            vals[inside] = img[ri[inside], ci[inside]]
            out += weight * vals
    return out


def render_digit(label: int, seed: int, index: int, size: int = 28) -> SignalGrid:
    """White-on-black digit with seeded affine jitter, stroke softening
    and light sensor noise."""
    rng = stream(seed, 20, index)
    glyph = _glyph_array(label % 10)
    theta = np.deg2rad(rng.uniform(-12.0, 12.0))
    scale = rng.uniform(0.85, 1.1)
    dy, dx = rng.uniform(-2.0, 2.0, size=2)
    gh = 0.68 * size * scale
    gw = gh * (5.0 / 7.0) * rng.uniform(0.85, 1.15)

    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u = rr - (size - 1) / 2.0 - dy
    v = cc - (size - 1) / 2.0 - dx
    ur = np.cos(theta) * u - np.sin(theta) * v
    vr = np.sin(theta) * u + np.cos(theta) * v
    gr = (ur / gh + 0.5) * 7.0 - 0.5
    gc = (vr / gw + 0.5) * 5.0 - 0.5
    canvas = _bilinear(glyph, gr, gc)

    img = SignalGrid(np.clip(canvas, 0.0, 1.0)[..., None])
    img = gaussian_blur_reference(img, rng.uniform(0.55, 0.95))
    peak = img.samples.max()
    if peak > 0:
        img = SignalGrid(img.samples / peak)
    noisy = img.samples + rng.normal(0.0, 0.02, size=img.samples.shape)
    return SignalGrid(np.clip(noisy, 0.0, 1.0))


def digit_dataset(seed: int, count: int, size: int = 28) -> list[tuple[SignalGrid, int]]:
    """Balanced labeled set: item i has label i mod 10 with per-item style."""
    return [(render_digit(i % 10, seed, i, size), i % 10) for i in range(count)]


def render_text_mask(shape: tuple[int, int], digits: str, seed: int = 0) -> SignalGrid:
    """White glyph overlay covering part of the grid, for the text-removal
    corruption protocol."""
    h, w = shape
    canvas = np.zeros((h, w))
    n = len(digits)
    step = w // (n + 1)
    for i, ch in enumerate(digits):
        glyph = _glyph_array(int(ch))
        scale = max(1, h // 14)
        gh, gw = 7 * scale, 5 * scale
        r0 = (h - gh) // 2
        c0 = step * (i + 1) - gw // 2
        big = np.kron(glyph, np.ones((scale, scale)))
        r1, c1 = min(h, r0 + gh), min(w, c0 + gw)
        if r0 < 0 or c0 < 0:
            continue
        canvas[r0:r1, c0:c1] = np.maximum(canvas[r0:r1, c0:c1], big[: r1 - r0, : c1 - c0])
    return SignalGrid(canvas[..., None])


def desk_image(seed: int, size: int = 64) -> SignalGrid:
    """Smooth synthetic grayscale scene: a low-frequency field plus soft
    blobs and one soft-edged shape, band-limited by a final blur.

    Kept gentle on purpose: analytic gradients of a fitted network stay
    within the decodable value range.
    """
    rng = stream(seed, 21)
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    field = np.zeros((size, size))
    for _ in range(10):
        fy, fx = rng.integers(0, 4, size=2)
        amp = rng.uniform(0.2, 1.0) / (1.0 + fy + fx)
        phase = rng.uniform(0, 2 * np.pi)
        field += amp * np.cos(2 * np.pi * (fy * ys + fx * xs) + phase)
    for _ in range(rng.integers(2, 4)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        sg = rng.uniform(0.08, 0.22)
        amp = rng.uniform(-1.0, 1.0)
        field += amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sg**2))
    # one soft disk with a tanh edge profile
    cy, cx = rng.uniform(0.25, 0.75, size=2)
    radius = rng.uniform(0.12, 0.3)
    dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    field += rng.uniform(-0.8, 0.8) * 0.5 * (1.0 - np.tanh((dist - radius) / 0.04))

    field = gaussian_blur_reference(SignalGrid(field[..., None]), 1.2).samples[..., 0]
    lo, hi = field.min(), field.max()
    field = 0.08 + 0.84 * (field - lo) / (hi - lo)
    return SignalGrid(field[..., None])


def desk_image_set(seed: int, count: int, size: int = 64) -> list[SignalGrid]:
    return [desk_image(seed * 1000 + i, size) for i in range(count)]


def bundled_asset_path(name: str) -> Path:
    return Path(resources.files("insp").joinpath("assets", name))


def bundled_image(i: int) -> SignalGrid:
    """One of the three packaged 64x64 grayscale test images."""
    from .signal_io import load_pgm

    path = bundled_asset_path(f"test_image_{i}.pgm")
    return load_pgm(path.read_bytes())


def bundled_wav_bytes() -> bytes:
    return bundled_asset_path("test_tone.wav").read_bytes()


def write_digit_dataset(
    out_dir: str | Path, n_train: int, n_test: int, seed: int, size: int = 28
) -> tuple[Path, Path]:
    """Materialize digit images plus train/test manifests (path,label)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifests = []
    offset = 0
    for split, n in (("train", n_train), ("test", n_test)):
        lines = []
        for i in range(n):
            img, label = render_digit((offset + i) % 10, seed, offset + i, size), (offset + i) % 10
            rel = f"images/{split}_{i:05d}.pgm"
            (out / rel).write_bytes(save_pgm(img))
            lines.append(f"{rel},{label}")
        manifest = out / f"{split}.csv"
        manifest.write_text("\n".join(lines) + "\n")
        manifests.append(manifest)
        offset += n
    return manifests[0], manifests[1]


def _main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python3 -m insp.datasets",
        description="Generate the deterministic digit subset with manifests.",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--train", type=int, default=1000)
    parser.add_argument("--test", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=28)
    args = parser.parse_args(argv)
    train, test = write_digit_dataset(args.out, args.train, args.test, args.seed, args.size)
    print(f"wrote {train} and {test}")
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
