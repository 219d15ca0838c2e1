"""Synthetic RGB-T scenes and binary netpbm (P5/P6) image I/O."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

IGNORE = 255


@dataclass
class Sample:
    rgb: np.ndarray  # 3×H×W float32 in [0, 1]
    thermal: np.ndarray  # 1×H×W float32 in [0, 1]
    labels: np.ndarray  # H×W int64, class id or IGNORE
    thermal_only: np.ndarray | None = None  # H×W bool, pixels of RGB-invisible shapes
    n_shapes: int = 0
    n_thermal_only: int = 0

    def __post_init__(self):
        h, w = self.labels.shape
        if self.rgb.shape != (3, h, w) or self.thermal.shape != (1, h, w):
            raise ContractError(f"sample extents disagree: rgb {self.rgb.shape}, thermal {self.thermal.shape}, labels {self.labels.shape}")


def _palette(k: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb((c - 1) / max(k - 1, 1), 0.8, 0.9) for c in range(1, k)]
    return np.array([(0.0, 0.0, 0.0)] + cols)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ry = rng.uniform(0.18, 0.32) * h
    rx = rng.uniform(0.18, 0.32) * w
    cy = rng.uniform(0.2, 0.8) * (h - 1)
    cx = rng.uniform(0.2, 0.8) * (w - 1)
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _gradient(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    gy, gx = rng.uniform(-amp, amp, 2)
    yy, xx = np.mgrid[0:h, 0:w]
    return gy * (yy / max(h - 1, 1) - 0.5) + gx * (xx / max(w - 1, 1) - 0.5)


def gen_synthetic(
    n: int, h: int, w: int, k: int, seed: int = 0, thermal_only_frac: float = 0.3, noise: float = 0.04
) -> list[Sample]:
    """Scenes of k-1 random rectangles/ellipses (class = shape id) on background 0.

    RGB carries a per-class colour, thermal a per-class temperature; each
    shape is independently left out of the RGB image with probability
    ``thermal_only_frac``.
    """
    if k < 2:
        raise ContractError(f"need k >= 2 classes, got {k}")
    if h % 4 or w % 4 or h < 4 or w < 4:
        raise ContractError(f"h and w must be positive multiples of 4, got {h}×{w}")
    rng = np.random.default_rng(seed)
    palette = _palette(k)
    temps = 0.45 + 0.5 * np.arange(k) / (k - 1)
    out = []
    for _ in range(n):
        labels = np.zeros((h, w), dtype=np.int64)
        tonly = np.zeros((h, w), dtype=bool)
        rgb = np.empty((3, h, w))
        base = rng.uniform(0.3, 0.45, 3)
        for ch in range(3):
            rgb[ch] = base[ch] + _gradient(rng, h, w, 0.1)
        background = rgb.copy()
        thermal = 0.2 + _gradient(rng, h, w, 0.05)
        n_tonly = 0
        for c in rng.permutation(np.arange(1, k)):
            mask = _shape_mask(rng, h, w)
            hidden = bool(rng.random() < thermal_only_frac)
            n_tonly += hidden
            labels[mask] = c
            tonly[mask] = hidden
            thermal[mask] = temps[c] + rng.uniform(-0.03, 0.03)
            if hidden:
                # an RGB-invisible shape also hides whatever it covers
                rgb[:, mask] = background[:, mask]
            else:
                rgb[:, mask] = (palette[c] + rng.uniform(-0.05, 0.05, 3))[:, None]
        rgb += noise * rng.standard_normal(rgb.shape)
        thermal = thermal + noise * rng.standard_normal(thermal.shape)
        out.append(
            Sample(
                np.clip(rgb, 0, 1).astype(np.float32),
                np.clip(thermal, 0, 1)[None].astype(np.float32),
                labels,
                tonly,
                k - 1,
                n_tonly,
            )
        )
    return out


# ---------------------------------------------------------------- netpbm


def _parse_header(buf: bytes, magic: bytes, path: str) -> tuple[int, int, int]:
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0, path)
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(buf):
            raise FormatError("truncated header", pos, path)
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            values.append((int(buf[start:pos]), start))
        else:
            raise FormatError(f"unexpected byte {ch!r} in header", pos, path)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("expected a single whitespace byte after maxval", pos, path)
    (w, w_at), (h, h_at), (maxval, mv_at) = values
    if w < 1 or h < 1:
        raise FormatError(f"invalid extent {w}×{h}", w_at if w < 1 else h_at, path)
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported, only 255", mv_at, path)
    return w, h, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, start = _parse_header(buf, magic, str(path))
    need = w * h * channels
    if len(buf) - start < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - start}", len(buf), str(path))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return raw.reshape(h, w, channels).transpose(2, 0, 1).copy()


def read_ppm(path) -> np.ndarray:
    """P6 -> 3×H×W float32 in [0, 1]."""
    return (_read(path, b"P6", 3) / 255.0).astype(np.float32)


def read_pgm(path, raw: bool = False) -> np.ndarray:
    """P5 -> 1×H×W float32 in [0, 1], or H×W integers when ``raw``."""
    data = _read(path, b"P5", 1)
    return data[0].astype(np.int64) if raw else (data / 255.0).astype(np.float32)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    _, h, w = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + _quantize(rgb).transpose(1, 2, 0).tobytes())


def write_pgm(path, img: np.ndarray, raw: bool = False) -> None:
    """Grey image; ``raw`` writes integer values (labels, class maps) unscaled."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    if raw:
        if img.min() < 0 or img.max() > 255:
            raise ContractError("raw PGM values must lie in [0, 255]")
        payload = img.astype(np.uint8)
    else:
        payload = _quantize(img)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + payload.tobytes())


def load_pair(rgb_path, thermal_path, label_path=None) -> Sample:
    rgb = read_ppm(rgb_path)
    thermal = read_pgm(thermal_path)
    if thermal.shape[1:] != rgb.shape[1:]:
        raise FormatError(f"thermal extent {thermal.shape[1:]} differs from rgb {rgb.shape[1:]}", 0, str(thermal_path))
    if label_path is None:
        labels = np.full(rgb.shape[1:], IGNORE, dtype=np.int64)
    else:
        labels = read_pgm(label_path, raw=True)
        if labels.shape != rgb.shape[1:]:
            raise FormatError(f"label extent {labels.shape} differs from rgb {rgb.shape[1:]}", 0, str(label_path))
    return Sample(rgb, thermal, labels)


def save_dataset(samples: list[Sample], root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_ppm(root / f"{i:05d}_rgb.ppm", s.rgb)
        write_pgm(root / f"{i:05d}_thermal.pgm", s.thermal)
        write_pgm(root / f"{i:05d}_label.pgm", s.labels, raw=True)
        if s.thermal_only is not None:
            write_pgm(root / f"{i:05d}_tonly.pgm", s.thermal_only.astype(np.uint8), raw=True)


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    out = []
    for rgb_path in sorted(root.glob("*_rgb.ppm")):
        stem = rgb_path.name[: -len("_rgb.ppm")]
        s = load_pair(rgb_path, root / f"{stem}_thermal.pgm", root / f"{stem}_label.pgm")
        tonly = root / f"{stem}_tonly.pgm"
        if tonly.exists():
            s.thermal_only = read_pgm(tonly, raw=True).astype(bool)
        out.append(s)
    if not out:
        raise ContractError(f"no *_rgb.ppm samples found in {root}")
    return out
