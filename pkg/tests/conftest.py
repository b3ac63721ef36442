import copy

import numpy as np
import pytest

from image_io import ImageSequence, ModeSpec, SyntheticSpec, generate_synthetic_sequence


def smooth_pattern(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Band-limited test image, valid at any real (row, col)."""
    image = 120.0 + 40.0 * np.sin(2 * np.pi * cols / 31.0) * np.cos(2 * np.pi * rows / 27.0)
    image += 50.0 * np.exp(-((rows - 30.0) ** 2 + (cols - 26.0) ** 2) / (2 * 9.0 ** 2))
    image += 0.4 * rows
    return image


def shifted_pair(shape=(64, 64), shift=(0.0, 0.0)):
    """(reference, target) with target(x) = reference(x - shift); shift is (x, y)."""
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    reference = smooth_pattern(rows, cols)
    target = smooth_pattern(rows - shift[1], cols - shift[0])
    return reference, target


@pytest.fixture
def two_mode_spec():
    return SyntheticSpec(height=48, width=48, n_frames=40, margin=6, quantize=False, seed=3,
                         modes=[ModeSpec(kind="breathing", amplitude_px=2.0, frequency_hz=0.25),
                                ModeSpec(kind="expansion", amplitude_px=1.5, frequency_hz=0.41, width_frac=0.3)])


@pytest.fixture
def two_mode(two_mode_spec):
    return generate_synthetic_sequence(two_mode_spec)


@pytest.fixture
def static_sequence():
    rows, cols = np.mgrid[0:32, 0:32].astype(np.float64)
    frame = smooth_pattern(rows, cols)
    return ImageSequence(frames=np.stack([frame] * 5), sampling_hz=3.0, name="static")


@pytest.fixture
def sine_weights():
    """Two smooth periodic weight signals, 120 frames."""
    t = np.arange(120) / 3.0
    return np.column_stack([np.sin(2 * np.pi * 0.25 * t), 0.5 * np.cos(2 * np.pi * 0.4 * t)])


# small enough for an end-to-end run in a few seconds
TINY_EXPERIMENT = {
    "m_train": 20,
    "m_train_linreg": 24,
    "m_cv": 30,
    "horizons": [1, 2],
    "methods": ["snap1", "lms", "linreg"],
    "grids": {
        "snap1": {"eta": [0.01], "L": [4], "q": [4]},
        "lms": {"eta": [0.05], "L": [4]},
        "linreg": {"L": [4]},
    },
    "n_cp_range": [1, 2],
    "runs": {"snap1": {"n_cv": 2, "n_warp": 2, "n_test_pca": 2}},
    "flow_grid": {"sigma_init": [0.1], "sigma_sub": [0.5], "sigma_lk": [2.0], "n_layers": [1, 2], "n_iter": [1]},
    "weight_eval_n_cp": 2,
    "save_frames": [35],
    "synthetic": {"height": 32, "width": 32, "n_frames": 40, "margin": 6, "noise_std": 0.5,
                  "seed": 1, "name": "tiny"},
}


@pytest.fixture
def tiny_experiment():
    return copy.deepcopy(TINY_EXPERIMENT)
