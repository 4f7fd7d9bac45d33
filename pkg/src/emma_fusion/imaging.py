"""Images, synthetic scene pairs, and bit-exact file formats.

Images are plain ``numpy`` float64 arrays shaped ``(H, W)`` or ``(H, W, 3)``
holding normalized intensities in ``[0, 1]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError, MissingFileError, ShapeError

MIN_SCENE_SIDE = 32
TENSOR_MAGIC = b"EMT1"

# modality_a: blur then sigmoid tone curve centred on bright content
IR_BLUR_SIGMA = 1.5
IR_CONTRAST = 8.0
IR_CENTER = 0.55
# modality_b: remove a wide low-pass bias, re-amplify fine detail
VIS_BIAS_SIGMA = 8.0
VIS_BIAS_STRENGTH = 0.8
VIS_DETAIL_SIGMA = 1.0
VIS_DETAIL_GAIN = 0.5


def check_image(x: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the Image invariants and return ``x`` as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or (x.ndim == 3 and x.shape[2] not in (1, 3)):
        raise ShapeError(f"{name} must be HxW or HxWxC with C in (1, 3), got {x.shape}")
    if x.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise InputError(f"{name} has values outside [0, 1]")
    return x


@dataclass(frozen=True)
class ScenePair:
    """A latent scene and the two simulated measurements of it."""

    truth: np.ndarray
    modality_a: np.ndarray
    modality_b: np.ndarray
    seed: int

    def __post_init__(self):
        shapes = {self.truth.shape[:2], self.modality_a.shape[:2], self.modality_b.shape[:2]}
        if len(shapes) != 1:
            raise ShapeError(f"scene pair images disagree in size: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.truth.shape[:2]


@dataclass
class Dataset:
    pairs: list[ScenePair]
    patch_size: int
    heldout: list[ScenePair] = field(default_factory=list)

    def __post_init__(self):
        if self.patch_size <= 0 or self.patch_size % 2:
            raise InputError(f"patch_size must be a positive even integer, got {self.patch_size}")
        for p in [*self.pairs, *self.heldout]:
            if self.patch_size > min(p.shape):
                raise InputError(
                    f"patch_size {self.patch_size} exceeds pair {p.seed} of size {p.shape}"
                )


# --------------------------------------------------------------------------
# synthetic scenes


def _band_limited_noise(rng: np.random.Generator, h: int, w: int, lo: float, hi: float):
    white = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    mask = (radius >= lo) & (radius <= hi)
    tex = np.real(np.fft.ifft2(np.fft.fft2(white) * mask))
    std = tex.std()
    return tex / std if std > 0 else tex


def make_truth(seed: int, height: int, width: int) -> np.ndarray:
    """Latent scene: gradient background, >= 3 flat primitives, fine texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height - 1
    xx /= width - 1

    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    scene = 0.2 + 0.3 * ramp

    n_shapes = int(rng.integers(3, 7))
    levels = rng.choice(np.linspace(0.05, 0.95, 19), size=n_shapes, replace=False)
    for level in levels:
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.22)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        else:
            hy, hx = rng.uniform(0.06, 0.2, size=2)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        scene[mask] = level

    scene += 0.06 * _band_limited_noise(rng, height, width, 0.15, 0.35)
    return np.clip(scene, 0.0, 1.0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def derive_modalities(truth: np.ndarray, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Simulated sensors applied to a latent scene.

    ``modality_a`` (infrared-like) is a Gaussian blur followed by a sigmoid
    tone curve rescaled to ``[0, 1]``: bright regions survive, texture and
    dark detail are lost. ``modality_b`` (visible-like) subtracts a wide
    low-pass bias and re-amplifies fine detail: edges and texture survive,
    absolute brightness does not. Both are fixed functions of ``truth``;
    ``seed`` is accepted for interface symmetry and does not alter them.
    """
    truth = np.asarray(truth, dtype=np.float64)
    blurred = ndimage.gaussian_filter(truth, IR_BLUR_SIGMA, mode="reflect")
    lo = _sigmoid(-IR_CONTRAST * IR_CENTER)
    hi = _sigmoid(IR_CONTRAST * (1.0 - IR_CENTER))
    modality_a = (_sigmoid(IR_CONTRAST * (blurred - IR_CENTER)) - lo) / (hi - lo)

    bias = ndimage.gaussian_filter(truth, VIS_BIAS_SIGMA, mode="reflect")
    detail = truth - ndimage.gaussian_filter(truth, VIS_DETAIL_SIGMA, mode="reflect")
    modality_b = truth - VIS_BIAS_STRENGTH * (bias - 0.5) + VIS_DETAIL_GAIN * detail

    return np.clip(modality_a, 0.0, 1.0), np.clip(modality_b, 0.0, 1.0)


def generate_scene_pair(seed: int, height: int, width: int) -> ScenePair:
    if height < MIN_SCENE_SIDE or width < MIN_SCENE_SIDE:
        raise InputError(
            f"scene must be at least {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}, got {height}x{width}"
        )
    truth = make_truth(seed, height, width)
    a, b = derive_modalities(truth, seed)
    return ScenePair(truth=truth, modality_a=a, modality_b=b, seed=seed)


def crop_random_patch(pair: ScenePair, patch_size: int, rng: np.random.Generator) -> ScenePair:
    """Cut the same random square window from all three images of ``pair``."""
    h, w = pair.shape
    if patch_size <= 0 or patch_size > min(h, w):
        raise InputError(f"patch {patch_size} does not fit in a {h}x{w} pair")
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    window = (slice(top, top + patch_size), slice(left, left + patch_size))
    return ScenePair(
        truth=pair.truth[window],
        modality_a=pair.modality_a[window],
        modality_b=pair.modality_b[window],
        seed=pair.seed,
    )


# --------------------------------------------------------------------------
# PGM / PPM


def quantize(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _read_token(buf: bytes, pos: int, field_name: str) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(field_name, "header ended before this field")
    return buf[start:pos], pos


def _read_int(buf: bytes, pos: int, field_name: str) -> tuple[int, int]:
    tok, pos = _read_token(buf, pos, field_name)
    if not tok.isdigit():
        raise FormatError(field_name, f"expected a decimal integer, got {tok!r}")
    return int(tok), pos


def decode_pnm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0, "magic")
    if magic not in (b"P5", b"P6"):
        raise FormatError("magic", f"expected P5 or P6, got {magic!r}")
    channels = 1 if magic == b"P5" else 3
    width, pos = _read_int(buf, pos, "width")
    height, pos = _read_int(buf, pos, "height")
    maxval, pos = _read_int(buf, pos, "maxval")
    if width == 0 or height == 0:
        raise FormatError("width" if width == 0 else "height", "must be positive")
    if maxval != 255:
        raise FormatError("maxval", f"only 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("payload", "missing whitespace after maxval")
    payload = buf[pos + 1 :]
    expected = width * height * channels
    if len(payload) < expected:
        raise FormatError("payload", f"truncated: expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise FormatError("payload", f"{len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    shape = (height, width) if channels == 1 else (height, width, 3)
    return data.reshape(shape)


def encode_pnm(image: np.ndarray) -> bytes:
    image = check_image(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    magic = b"P5" if image.ndim == 2 else b"P6"
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + quantize(image).tobytes()


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such image: {path}")
    return decode_pnm(path.read_bytes())


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise MissingFileError(f"parent directory does not exist: {path.parent}")
    path.write_bytes(encode_pnm(image))


# --------------------------------------------------------------------------
# EMT1 tensors


def encode_tensor(blob) -> bytes:
    arr = np.ascontiguousarray(np.asarray(blob, dtype="<f4"))
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError("magic", "file shorter than the fixed header")
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError("magic", f"expected {TENSOR_MAGIC!r}, got {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims_end = 8 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError("dims", f"rank {rank} but header truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64))
    payload = buf[dims_end:]
    if len(payload) != 4 * count:
        raise FormatError(
            "payload", f"dims {list(dims)} need {4 * count} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor(blob, path) -> None:
    Path(path).write_bytes(encode_tensor(blob))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such tensor file: {path}")
    return decode_tensor(path.read_bytes())


# --------------------------------------------------------------------------
# dataset directories

MANIFEST_NAME = "manifest.json"


def pair_seeds(seed: int, num_pairs: int, num_heldout: int) -> tuple[list[int], list[int]]:
    """Seeds for the training and held-out pairs of a dataset built from ``seed``."""
    base = 10_000 * seed
    train = [base + k for k in range(num_pairs)]
    heldout = [base + 5_000 + k for k in range(num_heldout)]
    return train, heldout


def build_dataset(
    seed: int, num_pairs: int, height: int, width: int, patch_size: int, num_heldout: int = 0
) -> Dataset:
    train, held = pair_seeds(seed, num_pairs, num_heldout)
    return Dataset(
        pairs=[generate_scene_pair(s, height, width) for s in train],
        patch_size=patch_size,
        heldout=[generate_scene_pair(s, height, width) for s in held],
    )


def _pair_files(split: str, index: int) -> dict[str, str]:
    stem = f"{split}_{index:03d}"
    return {
        "truth": f"{stem}_truth.pgm",
        "modality_a": f"{stem}_a.pgm",
        "modality_b": f"{stem}_b.pgm",
    }


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write every pair as 8-bit PGMs plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, pairs in (("train", dataset.pairs), ("heldout", dataset.heldout)):
        for k, pair in enumerate(pairs):
            files = _pair_files(split, k)
            for key, name in files.items():
                save_image(getattr(pair, key), directory / name)
            h, w = pair.shape
            entries.append({"seed": pair.seed, "split": split, "height": h, "width": w, "files": files})
    manifest = {"schema": 1, "patch_size": dataset.patch_size, "pairs": entries}
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory, patch_size: int | None = None) -> Dataset:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise MissingFileError(f"no dataset manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["pairs"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError("manifest", str(exc)) from exc
    train, held = [], []
    for entry in entries:
        images = {k: load_image(directory / name) for k, name in entry["files"].items()}
        pair = ScenePair(seed=int(entry["seed"]), **images)
        (held if entry["split"] == "heldout" else train).append(pair)
    return Dataset(train, patch_size or int(manifest["patch_size"]), held)
