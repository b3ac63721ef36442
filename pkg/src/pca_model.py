import json
import logging
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from image_io import check_field, read_dvf, write_dvf

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-12


class MotionModelError(Exception):
    pass


@dataclass(frozen=True)
class MotionDataMatrix:
    X: np.ndarray        # (M, 2|I|), rows are interleaved ux, uy per pixel
    mu_X: np.ndarray     # (2|I|,)
    Xc: np.ndarray
    shape: Tuple[int, int]

    @classmethod
    def from_rows(cls, X: np.ndarray, shape: Tuple[int, int] = None) -> "MotionDataMatrix":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise MotionModelError(f"data matrix needs at least 2 rows, got shape {X.shape}")
        if shape is None:
            if X.shape[1] % 2:
                raise MotionModelError(f"row length {X.shape[1]} is not an interleaved 2D field")
            shape = (1, X.shape[1] // 2)
        mu = X.mean(axis=0)
        return cls(X=X, mu_X=mu, Xc=X - mu, shape=tuple(shape))

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class MotionModel:
    mu: np.ndarray              # (H, W, 2)
    components: np.ndarray      # (n_cp, H, W, 2)
    eigenvalues: np.ndarray     # singular values of Xc, descending
    train_weights: np.ndarray   # (M, n_cp)
    explained_variance_ratio: np.ndarray
    m_train: int

    @property
    def n_cp(self) -> int:
        return self.components.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mu.shape[:2]

    @property
    def basis(self) -> np.ndarray:
        """U as (2|I|, n_cp)."""
        return self.components.reshape(self.n_cp, -1).T


def build_data_matrix(fields: np.ndarray, m_train: int) -> MotionDataMatrix:
    """Stack the first m_train fields (frame order) as interleaved rows."""
    fields = np.asarray(getattr(fields, "fields", fields), dtype=np.float64)
    if m_train < 2:
        raise MotionModelError(f"m_train must be at least 2, got {m_train}")
    if m_train > len(fields):
        raise MotionModelError(f"m_train {m_train} exceeds the {len(fields)} available fields")
    train = fields[:m_train]
    return MotionDataMatrix.from_rows(train.reshape(m_train, -1), shape=train.shape[1:3])


def _sign_normalize(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so that its first non-zero entry is positive."""
    vectors = vectors.copy()
    for j in range(vectors.shape[1]):
        column = vectors[:, j]
        nonzero = np.flatnonzero(np.abs(column) > RANK_TOLERANCE * np.abs(column).max())
        if nonzero.size and column[nonzero[0]] < 0:
            vectors[:, j] = -column
    return vectors


def fit_motion_model(data: MotionDataMatrix, n_cp: int) -> MotionModel:
    if n_cp < 1:
        raise MotionModelError(f"n_cp must be >= 1, got {n_cp}")
    if n_cp > data.n_rows:
        raise MotionModelError(f"requested components exceed data rank (n_cp={n_cp} > {data.n_rows} rows)")

    gram = data.Xc @ data.Xc.T
    eig, vecs = np.linalg.eigh(gram)
    order = np.argsort(eig)[::-1]
    eig = np.clip(eig[order], 0.0, None)
    vecs = vecs[:, order]

    if eig[0] <= 0 or eig[n_cp - 1] < RANK_TOLERANCE * eig[0]:
        raise MotionModelError(f"requested components exceed data rank (n_cp={n_cp})")

    V = _sign_normalize(vecs[:, :n_cp])
    lam = np.sqrt(eig[:n_cp])
    W = V * lam
    U = (data.Xc.T @ V) / lam

    height, width = data.shape
    model = MotionModel(
        mu=data.mu_X.reshape(height, width, 2),
        components=U.T.reshape(n_cp, height, width, 2),
        eigenvalues=lam,
        train_weights=W,
        explained_variance_ratio=eig[:n_cp] / eig.sum(),
        m_train=data.n_rows,
    )
    logger.info("PCA fit on %d frames: %d components explain %.1f%% of the motion",
                data.n_rows, n_cp, 100.0 * model.explained_variance_ratio.sum())
    return model


# ---------------------------------------------------------------------------
# Projection / reconstruction
# ---------------------------------------------------------------------------

def project(model: MotionModel, field: np.ndarray) -> np.ndarray:
    field = check_field(field, model.shape, error=MotionModelError)
    return (field - model.mu).reshape(-1) @ model.basis


def project_series(model: MotionModel, fields: np.ndarray) -> np.ndarray:
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 4 or fields.shape[1:] != model.mu.shape:
        raise MotionModelError(f"field series shape {fields.shape} does not match model {model.mu.shape}")
    return (fields - model.mu).reshape(len(fields), -1) @ model.basis


def reconstruct(model: MotionModel, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (model.n_cp,):
        raise MotionModelError(f"expected {model.n_cp} weights, got shape {weights.shape}")
    return model.mu + np.tensordot(weights, model.components, axes=1)


def reconstruct_series(model: MotionModel, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != model.n_cp:
        raise MotionModelError(f"expected (K, {model.n_cp}) weights, got shape {weights.shape}")
    return model.mu + np.tensordot(weights, model.components, axes=1)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def weights_frame(weights: np.ndarray, first_frame: int = 1) -> pd.DataFrame:
    weights = np.asarray(weights, dtype=np.float64)
    table = pd.DataFrame(weights, columns=[f"w{j + 1}" for j in range(weights.shape[1])])
    table.index = pd.RangeIndex(first_frame, first_frame + len(weights), name="frame")
    return table


def save_weights(path: str, weights: np.ndarray, first_frame: int = 1) -> None:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    weights_frame(weights, first_frame).to_csv(path, float_format="%.10g")


def load_weights(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise MotionModelError(f"weights file not found: {path}")
    table = pd.read_csv(path, index_col="frame")
    return table.to_numpy(dtype=np.float64)


def save_motion_model(model: MotionModel, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_dvf(os.path.join(out_dir, "mean.dvf"), model.mu)
    for j, component in enumerate(model.components, start=1):
        write_dvf(os.path.join(out_dir, f"component_{j:02d}.dvf"), component)
    sidecar = {
        "eigenvalues": model.eigenvalues.tolist(),
        "n_cp": model.n_cp,
        "m_train": model.m_train,
        "explained_variance_ratio": model.explained_variance_ratio.tolist(),
    }
    with open(os.path.join(out_dir, "model.json"), "w") as f:
        json.dump(sidecar, f, indent=2)
    save_weights(os.path.join(out_dir, "train_weights.csv"), model.train_weights)


def load_motion_model(model_dir: str) -> MotionModel:
    sidecar_path = os.path.join(model_dir, "model.json")
    if not os.path.exists(sidecar_path):
        raise MotionModelError(f"no model.json in {model_dir}")
    with open(sidecar_path, "r") as f:
        sidecar = json.load(f)

    n_cp = int(sidecar["n_cp"])
    components = np.stack([read_dvf(os.path.join(model_dir, f"component_{j:02d}.dvf"))
                           for j in range(1, n_cp + 1)])
    return MotionModel(
        mu=read_dvf(os.path.join(model_dir, "mean.dvf")),
        components=components,
        eigenvalues=np.asarray(sidecar["eigenvalues"], dtype=np.float64),
        train_weights=load_weights(os.path.join(model_dir, "train_weights.csv")),
        explained_variance_ratio=np.asarray(sidecar.get("explained_variance_ratio", []), dtype=np.float64),
        m_train=int(sidecar["m_train"]),
    )
