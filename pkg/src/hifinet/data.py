"""Image files, paired datasets and synthetic underwater degradation."""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageDecodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM (binary P6)

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n\r]*[\n\r]\s*)*(\S+)")


def decode_ppm(raw: bytes) -> tuple[np.ndarray, int]:
    """Decode a binary P6 file into an (h, w, 3) integer array and its maxval."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PPM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageDecodeError("truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ImageDecodeError(f"not a binary PPM (magic {tokens[0][:8]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageDecodeError(f"bad PPM header: {exc}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"bad PPM dimensions {w}x{h} maxval {maxval}")
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ImageDecodeError("PPM header must end with one whitespace byte")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dtype.itemsize
    if len(raw) - pos < need:
        raise ImageDecodeError(f"PPM raster truncated: need {need} bytes, have {len(raw) - pos}")
    pix = np.frombuffer(raw, dtype=dtype, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return pix.astype(np.int64), maxval


def encode_ppm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"PPM needs (h, w, 3) pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P6\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.ascontiguousarray(pixels, dtype=dtype).tobytes()


# ---------------------------------------------------------------------------
# generic image I/O


def read_image(path) -> Tensor:
    """Read an 8-bit RGB PNG or a P6 PPM as a (1, 3, h, w) tensor in [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from None
    if raw.startswith(b"P6"):
        pix, maxval = decode_ppm(raw)
        arr = pix / float(maxval)
    else:
        try:
            from PIL import Image
            import io

            with Image.open(io.BytesIO(raw)) as im:
                im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except Exception as exc:  # noqa: BLE001 - any decoder failure
            raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from None
    arr = np.clip(arr, 0.0, 1.0)
    return Tensor(arr.transpose(2, 0, 1)[None].copy())


def to_uint8(image) -> np.ndarray:
    """(1, 3, h, w) or (3, h, w) values in [0, 1] -> (h, w, 3) uint8, rounding to nearest."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"can only write one image at a time, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected a 3-channel image, got {arr.shape}")
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, image) -> None:
    """Write PNG or PPM depending on the file suffix."""
    path = Path(path)
    pix = to_uint8(image)
    if path.suffix.lower() == ".ppm":
        path.write_bytes(encode_ppm(pix))
        return
    from PIL import Image

    Image.fromarray(pix).save(path)


# ---------------------------------------------------------------------------
# paired datasets


@dataclass(frozen=True)
class ImagePair:
    id: str
    degraded: Tensor
    ground_truth: Tensor

    def __post_init__(self):
        if self.degraded.shape != self.ground_truth.shape:
            raise ShapeError(f"pair {self.id}: {self.degraded.shape} vs {self.ground_truth.shape}")


def _index_dir(d: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(d.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            out.setdefault(p.stem, p)
    return out


def load_pairs(dir_degraded, dir_gt, errors: list | None = None) -> list[ImagePair]:
    """Match images by file stem; sorted by stem.

    Unmatched stems are logged and skipped; undecodable files are appended
    to ``errors`` as ``(id, message)`` and skipped.
    """
    deg, gt = _index_dir(Path(dir_degraded)), _index_dir(Path(dir_gt))
    for stem in sorted(set(deg) ^ set(gt)):
        side = "ground-truth" if stem in deg else "degraded"
        log.warning("no %s image for %r; skipping", side, stem)
    pairs = []
    for stem in sorted(set(deg) & set(gt)):
        try:
            pairs.append(ImagePair(stem, read_image(deg[stem]), read_image(gt[stem])))
        except (ImageDecodeError, ShapeError) as exc:
            log.warning("skipping %r: %s", stem, exc)
            if errors is not None:
                errors.append((stem, str(exc)))
    if not pairs:
        raise ValueError(f"no usable image pairs in {dir_degraded} and {dir_gt}")
    return pairs


def image_files(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return [p for p in sorted(path.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return [path]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class DegradationSpec:
    attenuation: tuple[float, float, float] = (1.0, 0.6, 0.5)
    beta: float = 0.3
    ambient: tuple[float, float, float] = (0.1, 0.45, 0.55)
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if len(self.attenuation) != 3 or not all(0 < a <= 1 for a in self.attenuation):
            raise ConfigError(f"attenuation must be three values in (0, 1], got {self.attenuation}")
        if len(self.ambient) != 3 or not all(0 <= a <= 1 for a in self.ambient):
            raise ConfigError(f"ambient must be three values in [0, 1], got {self.ambient}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


def synth_degrade(gt: Tensor, spec: DegradationSpec) -> Tensor:
    """Colour attenuation plus haze towards an ambient colour plus Gaussian noise."""
    x = gt.data
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"synth_degrade expects (n, 3, h, w), got {x.shape}")
    att = np.asarray(spec.attenuation, dtype=x.dtype).reshape(1, 3, 1, 1)
    amb = np.asarray(spec.ambient, dtype=x.dtype).reshape(1, 3, 1, 1)
    haze = 1.0 - np.exp(-spec.beta)
    direct = x * att
    out = direct + haze * (amb - direct)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        out = out + rng.normal(0.0, spec.noise, size=x.shape).astype(x.dtype)
    return Tensor(np.clip(out, 0.0, 1.0))


def synth_ground_truth(size: int, rng: np.random.Generator) -> np.ndarray:
    """A (3, size, size) scene: colour gradient, soft blobs and a few flat rectangles."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.15, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.5) / 3.0
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        colour = rng.uniform(0.0, 1.0, 3)
        wgt = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img = img * (1 - wgt) + colour[:, None, None] * wgt
    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.integers(0, size - 2, 2)
        hh, ww = rng.integers(2, max(3, size // 3), 2)
        img[:, y0:y0 + hh, x0:x0 + ww] = rng.uniform(0.0, 1.0, 3)[:, None, None]
    return np.clip(img, 0.0, 1.0)


def make_synthetic_pairs(count: int, size: int, spec: DegradationSpec, seed: int = 0,
                         prefix: str = "syn") -> list[ImagePair]:
    """Deterministic synthetic dataset; each pair gets its own noise stream."""
    rng = np.random.default_rng([seed, 7919])
    pairs = []
    for i in range(count):
        gt = Tensor(synth_ground_truth(size, rng)[None])
        noise_spec = DegradationSpec(spec.attenuation, spec.beta, spec.ambient, spec.noise,
                                     seed=int(np.random.SeedSequence([spec.seed, seed, i]).generate_state(1)[0]))
        pairs.append(ImagePair(f"{prefix}{i:04d}", synth_degrade(gt, noise_spec), gt))
    return pairs


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
