import json
import logging
import os
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, model_validator
from scipy import ndimage

logger = logging.getLogger(__name__)

MIN_FRAMES = 2
DVF_MAGIC = b"DVF1"
DVF_HEADER_BYTES = 12

# fixed-point iterations used to invert the synthetic push-forward field
INVERSION_ITERATIONS = 30


class SequenceError(Exception):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def _as_spacing(value: Union[float, Sequence[float]]) -> Tuple[float, float]:
    if np.isscalar(value):
        spacing = (float(value), float(value))
    else:
        items = list(value)
        if len(items) != 2:
            raise SequenceError(f"pixel_spacing_mm needs 1 or 2 values, got {items}")
        spacing = (float(items[0]), float(items[1]))
    if min(spacing) <= 0:
        raise SequenceError(f"pixel_spacing_mm must be positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class ImageSequence:
    """Ordered grayscale frames (M, H, W) held as floats in [0, 255].

    pixel_spacing_mm is (x, y), i.e. column spacing then row spacing.
    """

    frames: np.ndarray
    pixel_spacing_mm: Tuple[float, float] = (1.0, 1.0)
    sampling_hz: float = 1.0
    name: str = "sequence"

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise SequenceError(f"frames must be stacked as (M, H, W), got shape {frames.shape}")
        if frames.shape[0] < MIN_FRAMES:
            raise SequenceError("sequence requires at least 2 frames")
        if not np.all(np.isfinite(frames)):
            raise SequenceError("frames contain non-finite intensities")
        if frames.min() < 0 or frames.max() > 255:
            raise SequenceError(
                f"intensities must lie in [0, 255], got [{frames.min():.3f}, {frames.max():.3f}]"
            )
        if not self.sampling_hz > 0:
            raise SequenceError(f"sampling_hz must be positive, got {self.sampling_hz}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "pixel_spacing_mm", _as_spacing(self.pixel_spacing_mm))
        object.__setattr__(self, "sampling_hz", float(self.sampling_hz))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, k: int) -> np.ndarray:
        """Frame at 1-based time index k."""
        if not 1 <= k <= self.n_frames:
            raise SequenceError(f"frame index {k} outside 1..{self.n_frames}")
        return self.frames[k - 1]


@dataclass(frozen=True)
class SyntheticGroundTruth:
    sequence: ImageSequence
    true_dvfs: np.ndarray        # (M, H, W, 2), field k maps frame 1 onto frame k
    weight_signals: np.ndarray   # (M, n_modes)


# ---------------------------------------------------------------------------
# Displacement fields
# ---------------------------------------------------------------------------

def zero_field(shape: Tuple[int, int]) -> np.ndarray:
    return np.zeros((shape[0], shape[1], 2), dtype=np.float64)


def check_field(field: np.ndarray, shape: Optional[Tuple[int, int]] = None,
                error: type = SequenceError) -> np.ndarray:
    """Validate an (H, W, 2) field whose channel 0 is x (columns) and channel 1 is y (rows)."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[2] != 2:
        raise error(f"displacement field must have shape (H, W, 2), got {field.shape}")
    if shape is not None and field.shape[:2] != tuple(shape):
        raise error(f"field shape {field.shape[:2]} does not match image shape {tuple(shape)}")
    if not np.all(np.isfinite(field)):
        raise error("displacement field contains non-finite entries")
    return field


def pixel_grid(shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return rows.astype(np.float64), cols.astype(np.float64)


def sample_bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear samples at fractional (row, col) positions, clamped to the border."""
    coords = np.stack([np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)])
    return ndimage.map_coordinates(np.asarray(image, dtype=np.float64), coords, order=1, mode="nearest")


def sample_displaced(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """image(x + u(x)) on the pixel grid of the field."""
    rows, cols = pixel_grid(field.shape[:2])
    return sample_bilinear(image, rows + field[..., 1], cols + field[..., 0])


# ---------------------------------------------------------------------------
# PGM frames + JSON manifest
# ---------------------------------------------------------------------------

def read_pgm(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise SequenceError(f"frame file not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise SequenceError(f"{path}: expected 8-bit grayscale PGM, got mode {img.mode}")
            return np.asarray(img, dtype=np.float64)
    except SequenceError:
        raise
    except OSError as exc:
        raise SequenceError(f"cannot read frame {path}: {exc}") from exc


def write_pgm(path: str, image: np.ndarray) -> None:
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    # Pillow's PPM writer emits binary P5 for 8-bit grayscale
    Image.fromarray(pixels).save(path, format="PPM")


def load_sequence(manifest_path: str) -> ImageSequence:
    if not os.path.exists(manifest_path):
        raise SequenceError(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise SequenceError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    missing = [key for key in ("frames", "pixel_spacing_mm", "sampling_hz") if key not in manifest]
    if missing:
        raise SequenceError(f"manifest {manifest_path} is missing keys: {missing}")

    frame_paths = manifest["frames"]
    if len(frame_paths) < MIN_FRAMES:
        raise SequenceError("sequence requires at least 2 frames")

    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    frames = []
    for rel_path in frame_paths:
        image = read_pgm(os.path.join(base_dir, rel_path))
        if frames and image.shape != frames[0].shape:
            raise SequenceError(
                f"dimension mismatch: {rel_path} is {image.shape[0]}x{image.shape[1]}, "
                f"expected {frames[0].shape[0]}x{frames[0].shape[1]}"
            )
        frames.append(image)

    name = manifest.get("name") or os.path.splitext(os.path.basename(manifest_path))[0]
    seq = ImageSequence(
        frames=np.stack(frames),
        pixel_spacing_mm=manifest["pixel_spacing_mm"],
        sampling_hz=manifest["sampling_hz"],
        name=name,
    )
    logger.info("Loaded %s: %d frames of %dx%d at %.2f Hz", seq.name, seq.n_frames, *seq.shape, seq.sampling_hz)
    return seq


def save_sequence(seq: ImageSequence, out_dir: str) -> str:
    """Write frames as PGM plus manifest.json; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    frame_names = []
    for k in range(1, seq.n_frames + 1):
        fname = f"frame_{k:04d}.pgm"
        write_pgm(os.path.join(out_dir, fname), seq.frame(k))
        frame_names.append(fname)

    manifest = {
        "frames": frame_names,
        "pixel_spacing_mm": list(seq.pixel_spacing_mm),
        "sampling_hz": seq.sampling_hz,
        "name": seq.name,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path


# ---------------------------------------------------------------------------
# DVF1 binary fields
# ---------------------------------------------------------------------------

def write_dvf(path: str, field: np.ndarray) -> None:
    field = check_field(field)
    height, width = field.shape[:2]
    header = DVF_MAGIC + np.array([height, width], dtype="<u4").tobytes()
    # all x components row-major, then all y components
    payload = np.ascontiguousarray(np.moveaxis(field, -1, 0)).astype("<f4").tobytes()
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header + payload)


def read_dvf(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise SequenceError(f"DVF file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < DVF_HEADER_BYTES or raw[:4] != DVF_MAGIC:
        raise SequenceError(f"{path} is not a DVF1 file")
    height, width = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=4))
    expected = DVF_HEADER_BYTES + 2 * height * width * 4
    if len(raw) != expected:
        raise SequenceError(f"{path}: expected {expected} bytes for {height}x{width}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=DVF_HEADER_BYTES).reshape(2, height, width)
    return np.moveaxis(data, 0, -1).astype(np.float64)


def save_dvf_series(fields: np.ndarray, out_dir: str) -> List[str]:
    paths = []
    for k, field in enumerate(fields, start=1):
        path = os.path.join(out_dir, f"dvf_{k:04d}.dvf")
        write_dvf(path, field)
        paths.append(path)
    return paths


def load_dvf_series(dvf_dir: str) -> np.ndarray:
    if not os.path.isdir(dvf_dir):
        raise SequenceError(f"DVF directory not found: {dvf_dir}")
    names = sorted(n for n in os.listdir(dvf_dir) if n.startswith("dvf_") and n.endswith(".dvf"))
    if not names:
        raise SequenceError(f"no dvf_*.dvf files in {dvf_dir}")
    return np.stack([read_dvf(os.path.join(dvf_dir, n)) for n in names])


# ---------------------------------------------------------------------------
# Synthetic sequences with analytic deformation
# ---------------------------------------------------------------------------

class ModeSpec(BaseModel):
    kind: Literal["translate_x", "translate_y", "breathing", "expansion"] = "breathing"
    amplitude_px: float = 3.0
    frequency_hz: float = Field(0.25, gt=0)
    # bump width relative to the smaller image side (breathing / expansion only)
    width_frac: float = Field(0.35, gt=0)


def _default_modes() -> List[ModeSpec]:
    return [
        ModeSpec(kind="breathing", amplitude_px=3.0, frequency_hz=0.25),
        ModeSpec(kind="expansion", amplitude_px=2.0, frequency_hz=0.41, width_frac=0.3),
    ]


class SyntheticSpec(BaseModel):
    height: int = Field(64, ge=16)
    width: int = Field(64, ge=16)
    n_frames: int = Field(200, ge=MIN_FRAMES)
    sampling_hz: float = Field(3.18, gt=0)
    pixel_spacing_mm: float = Field(1.0, gt=0)
    modes: List[ModeSpec] = Field(default_factory=_default_modes)
    irregularity: float = Field(0.1, ge=0)
    noise_std: float = Field(0.0, ge=0)
    quantize: bool = True
    margin: int = Field(8, ge=0)
    n_blobs: int = Field(6, ge=0)
    seed: int = 0
    name: str = "synthetic"

    @model_validator(mode="after")
    def _margin_fits(self):
        if 2 * self.margin >= min(self.height, self.width):
            raise ValueError(f"margin {self.margin} leaves no interior in {self.height}x{self.width}")
        return self


def reference_image(shape: Tuple[int, int], rng: np.random.Generator, n_blobs: int = 6) -> np.ndarray:
    """Smooth textured phantom: vertical gradient, Gaussian blobs and a faint sine pattern."""
    height, width = shape
    rows, cols = pixel_grid(shape)
    side = min(height, width)

    image = 60.0 + 80.0 * rows / max(height - 1, 1)
    for _ in range(n_blobs):
        cy = rng.uniform(0.15, 0.85) * (height - 1)
        cx = rng.uniform(0.15, 0.85) * (width - 1)
        sigma = rng.uniform(0.08, 0.18) * side
        amp = rng.uniform(-50.0, 70.0)
        image += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma ** 2))
    image += 10.0 * np.sin(2 * np.pi * cols / 16.0) * np.sin(2 * np.pi * rows / 19.0)
    return np.clip(image, 10.0, 245.0)


def mode_field(mode: ModeSpec, rows: np.ndarray, cols: np.ndarray,
               shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-peak displacement (ux, uy) of one deformation mode at arbitrary points."""
    cy, cx = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
    s = mode.width_frac * min(shape)
    if mode.kind == "translate_x":
        return np.ones_like(rows), np.zeros_like(rows)
    if mode.kind == "translate_y":
        return np.zeros_like(rows), np.ones_like(rows)

    bump = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * s ** 2))
    if mode.kind == "breathing":
        return np.zeros_like(rows), bump
    # radial profile r/s * exp(-r^2 / 2s^2) peaks at exp(-1/2)
    scale = np.sqrt(np.e) / s
    return scale * (cols - cx) * bump, scale * (rows - cy) * bump


def weight_signals(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Quasi-periodic signals (1 - cos phase) / 2, zero at the first frame, peak 1."""
    n = spec.n_frames
    signals = np.zeros((n, len(spec.modes)))
    for j, mode in enumerate(spec.modes):
        step = 2.0 * np.pi * mode.frequency_hz / spec.sampling_hz
        jitter = 1.0 + spec.irregularity * rng.standard_normal(n - 1)
        phase = np.concatenate([[0.0], np.cumsum(step * np.maximum(jitter, 0.2))])
        signals[:, j] = (1.0 - np.cos(phase)) / 2.0
    return signals


def _displacement(spec: SyntheticSpec, weights: np.ndarray, rows: np.ndarray,
                  cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    shape = (spec.height, spec.width)
    ux = np.zeros_like(rows)
    uy = np.zeros_like(rows)
    for mode, w in zip(spec.modes, weights):
        if w == 0.0 or mode.amplitude_px == 0.0:
            continue
        fx, fy = mode_field(mode, rows, cols, shape)
        ux += mode.amplitude_px * w * fx
        uy += mode.amplitude_px * w * fy
    return ux, uy


def generate_synthetic_sequence(spec: SyntheticSpec) -> SyntheticGroundTruth:
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    reference = reference_image(shape, rng, spec.n_blobs)
    signals = weight_signals(spec, rng)
    rows, cols = pixel_grid(shape)
    m = spec.margin
    interior = (slice(m, spec.height - m), slice(m, spec.width - m))

    frames = np.empty((spec.n_frames,) + shape)
    true_dvfs = np.zeros((spec.n_frames,) + shape + (2,))
    for k in range(spec.n_frames):
        ux, uy = _displacement(spec, signals[k], rows, cols)
        landed_r = (rows + uy)[interior]
        landed_c = (cols + ux)[interior]
        if (landed_r.min() < 0 or landed_r.max() > spec.height - 1
                or landed_c.min() < 0 or landed_c.max() > spec.width - 1):
            raise SequenceError(
                f"frame {k + 1}: mode amplitudes push interior content off-image "
                f"(max |u| = {np.hypot(ux, uy).max():.2f} px, margin {m} px)"
            )
        true_dvfs[k, ..., 0] = ux
        true_dvfs[k, ..., 1] = uy

        # pull-back: find source s with s + u(s) = y for every grid point y
        src_r, src_c = rows.copy(), cols.copy()
        for _ in range(INVERSION_ITERATIONS):
            vx, vy = _displacement(spec, signals[k], src_r, src_c)
            src_r, src_c = rows - vy, cols - vx
        frames[k] = ndimage.map_coordinates(reference, np.stack([src_r, src_c]), order=3, mode="nearest")

    if spec.noise_std > 0:
        frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
    frames = np.clip(frames, 0.0, 255.0)
    if spec.quantize:
        frames = np.rint(frames)

    seq = ImageSequence(
        frames=frames,
        pixel_spacing_mm=spec.pixel_spacing_mm,
        sampling_hz=spec.sampling_hz,
        name=spec.name,
    )
    logger.info("Generated synthetic sequence %s: %d frames, %d modes", spec.name, spec.n_frames, len(spec.modes))
    return SyntheticGroundTruth(sequence=seq, true_dvfs=true_dvfs, weight_signals=signals)


def save_synthetic(truth: SyntheticGroundTruth, out_dir: str) -> str:
    """Frames + manifest with the true fields under true_dvf/; returns the manifest path."""
    manifest_path = save_sequence(truth.sequence, out_dir)
    save_dvf_series(truth.true_dvfs, os.path.join(out_dir, "true_dvf"))
    return manifest_path
