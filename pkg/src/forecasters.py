import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np
from sklearn.linear_model import LinearRegression

logger = logging.getLogger(__name__)

TAU_RNN = 100.0
TAU_LMS = 2.0
SIGMA_INIT = 0.02
UORO_EPS = 1e-7

RNN_METHODS = ("rtrl", "uoro", "snap1", "dni", "frozen_rnn")
ONLINE_METHODS = RNN_METHODS + ("lms",)
METHODS = ONLINE_METHODS + ("linreg",)
BASELINE_METHOD = "previous_weight"


class ForecastError(Exception):
    pass


class ForecastDivergence(ForecastError):
    pass


# ---------------------------------------------------------------------------
# Supervised pairs + normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SupervisedPairs:
    inputs: np.ndarray          # (N, n_cp * L + 1), bias first
    targets: np.ndarray         # (N, n_cp)
    target_frames: np.ndarray   # (N,) 1-based frame index of each target

    def __len__(self) -> int:
        return len(self.inputs)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        return iter(zip(self.inputs, self.targets))

    def subset(self, mask: np.ndarray) -> "SupervisedPairs":
        return SupervisedPairs(self.inputs[mask], self.targets[mask], self.target_frames[mask])


def make_supervised_pairs(weights: np.ndarray, L: int, h: int, first: int = 1,
                          last: Optional[int] = None) -> SupervisedPairs:
    """Pairs n = first..last: [1, w(t_n), ..., w(t_{n+L-1})] -> w(t_{n+L+h-1}).

    Inputs are time-major: all components at t_n, then all at t_{n+1}, ...
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[:, None]
    if L < 1:
        raise ForecastError(f"signal history length L must be >= 1, got {L}")
    if h < 1:
        raise ForecastError(f"horizon h must be >= 1, got {h}")

    n_max = len(weights) - L - h + 1
    last = n_max if last is None else last
    if n_max < 1 or first < 1 or last > n_max or first > last:
        raise ForecastError(
            f"no valid pairs: L={L}, h={h} on {len(weights)} time steps (requested n in {first}..{last})"
        )

    starts = np.arange(first, last + 1)
    history = np.stack([weights[n - 1:n - 1 + L].ravel() for n in starts])
    inputs = np.hstack([np.ones((len(starts), 1)), history])
    target_frames = starts + L + h - 1
    return SupervisedPairs(inputs=inputs, targets=weights[target_frames - 1], target_frames=target_frames)


@dataclass(frozen=True)
class NormalizationStats:
    mu: np.ndarray
    sigma: np.ndarray
    n_outputs: int

    @classmethod
    def from_inputs(cls, inputs: np.ndarray, n_outputs: int) -> "NormalizationStats":
        inputs = np.asarray(inputs, dtype=np.float64)
        mu = inputs.mean(axis=0)
        sigma = inputs.std(axis=0)
        # constant coordinates (the bias among them) pass through unchanged
        constant = sigma == 0
        mu[constant] = 0.0
        sigma[constant] = 1.0
        return cls(mu=mu, sigma=sigma, n_outputs=n_outputs)

    @property
    def output_mu(self) -> np.ndarray:
        # outputs share the stats of the first time step's weight entries
        return self.mu[1:1 + self.n_outputs]

    @property
    def output_sigma(self) -> np.ndarray:
        return self.sigma[1:1 + self.n_outputs]


def normalize_inputs(inputs: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (inputs - stats.mu) / stats.sigma


def normalize_targets(targets: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return targets / stats.output_sigma - stats.output_mu


def denormalize(outputs: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return stats.output_sigma * (outputs + stats.output_mu)


def normalize_pairs(pairs: SupervisedPairs, stats: NormalizationStats) -> SupervisedPairs:
    return SupervisedPairs(
        inputs=normalize_inputs(pairs.inputs, stats),
        targets=normalize_targets(pairs.targets, stats),
        target_frames=pairs.target_frames,
    )


def clip_gradient(g: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ForecastError(f"clipping threshold must be positive, got {tau}")
    norm = np.linalg.norm(g)
    if norm <= tau:
        return g
    return g * (tau / norm)


# ---------------------------------------------------------------------------
# RNN state and forward pass
# ---------------------------------------------------------------------------

@dataclass
class RnnState:
    W_a: np.ndarray                 # (q, q)
    W_b: np.ndarray                 # (q, m + 1)
    W_c: np.ndarray                 # (p, q)
    x: np.ndarray                   # (q,)
    influence: Optional[np.ndarray] = None     # rtrl: (q, q * n); snap1: (q, n)
    x_tilde: Optional[np.ndarray] = None       # uoro
    theta_tilde: Optional[np.ndarray] = None   # uoro, length q * n
    A: Optional[np.ndarray] = None             # dni synthetic gradient, (q, q + 1)
    last_gradient: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def q(self) -> int:
        return self.W_a.shape[0]

    @property
    def n_rec(self) -> int:
        """Columns of the recurrent block [W_a | W_b]."""
        return self.W_a.shape[1] + self.W_b.shape[1]

    def copy(self) -> "RnnState":
        return replace(self, **{
            name: None if value is None else value.copy()
            for name, value in vars(self).items()
        })

    def reset_memory(self) -> None:
        """Zero the hidden state and every sensitivity structure; weights stay."""
        self.x = np.zeros_like(self.x)
        for name in ("influence", "x_tilde", "theta_tilde"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.zeros_like(value))


def init_rnn_state(method: str, q: int, m: int, p: int, rng: np.random.Generator,
                   sigma_init: float = SIGMA_INIT) -> RnnState:
    if method not in RNN_METHODS:
        raise ForecastError(f"unknown RNN training method '{method}'")
    state = RnnState(
        W_a=rng.normal(0.0, sigma_init, size=(q, q)),
        W_b=rng.normal(0.0, sigma_init, size=(q, m + 1)),
        W_c=rng.normal(0.0, sigma_init, size=(p, q)),
        x=np.zeros(q),
    )
    n = q + m + 1
    if method == "rtrl":
        state.influence = np.zeros((q, q * n))
    elif method == "snap1":
        state.influence = np.zeros((q, n))
    elif method == "uoro":
        state.x_tilde = np.zeros(q)
        state.theta_tilde = np.zeros(q * n)
    elif method == "dni":
        state.A = rng.normal(0.0, sigma_init, size=(q, q + 1))
    return state


def rnn_forward(state: RnnState, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (state.W_b.shape[1],):
        raise ForecastError(f"input of length {u.shape} does not match W_b with {state.W_b.shape[1]} columns")
    if state.W_a.shape != (state.q, state.q) or state.W_c.shape[1] != state.q or state.x.shape != (state.q,):
        raise ForecastError("inconsistent RNN weight shapes")
    x_new = np.tanh(state.W_a @ state.x + state.W_b @ u)
    return x_new, state.W_c @ x_new


def _check_finite(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise ForecastDivergence("divergence: non-finite values in the forecaster state")


def _apply_network_update(state: RnnState, g_rec: Optional[np.ndarray], g_out: np.ndarray,
                          eta: float) -> None:
    """Clip [dW_a, dW_b, dW_c] jointly at TAU_RNN and take one SGD step."""
    q = state.q
    parts = [g_out.ravel()] if g_rec is None else [g_rec[:, :q].ravel(), g_rec[:, q:].ravel(), g_out.ravel()]
    flat = np.concatenate(parts)
    state.last_gradient = flat
    step = eta * clip_gradient(flat, TAU_RNN)

    if g_rec is not None:
        n_a, n_b = state.W_a.size, state.W_b.size
        state.W_a = state.W_a - step[:n_a].reshape(state.W_a.shape)
        state.W_b = state.W_b - step[n_a:n_a + n_b].reshape(state.W_b.shape)
        step = step[n_a + n_b:]
    state.W_c = state.W_c - step.reshape(state.W_c.shape)


def _step_setup(state: RnnState, u: np.ndarray, target: np.ndarray):
    x_prev = state.x
    x_new, y = rnn_forward(state, u)
    a_hat = np.concatenate([x_prev, u])
    d = 1.0 - x_new ** 2
    e2 = 2.0 * (y - np.asarray(target, dtype=np.float64))
    credit = state.W_c.T @ e2   # dL/dx_new
    return x_prev, x_new, y, a_hat, d, e2, credit


def train_step_rtrl(state: RnnState, u: np.ndarray, target: np.ndarray,
                    eta: float) -> Tuple[RnnState, np.ndarray]:
    _, x_new, y, a_hat, d, e2, credit = _step_setup(state, u, target)
    q, n = state.q, state.n_rec

    # M <- J M + P, with P[k, (k, j)] = D_k a_hat_j
    jac = d[:, None] * state.W_a
    influence = (jac @ state.influence).reshape(q, q, n)
    diag = np.arange(q)
    influence[diag, diag, :] += d[:, None] * a_hat[None, :]
    state.influence = influence.reshape(q, q * n)

    g_rec = (credit @ state.influence).reshape(q, n)
    state.x = x_new
    _apply_network_update(state, g_rec, np.outer(e2, x_new), eta)
    _check_finite(state.W_a, state.W_b, state.W_c, state.x, state.influence)
    return state, y


def train_step_uoro(state: RnnState, u: np.ndarray, target: np.ndarray, eta: float,
                    rng: np.random.Generator) -> Tuple[RnnState, np.ndarray]:
    _, x_new, y, a_hat, d, e2, credit = _step_setup(state, u, target)
    q = state.q

    nu = 2.0 * rng.integers(0, 2, size=q) - 1.0
    jx = (d[:, None] * state.W_a) @ state.x_tilde
    nu_p = ((nu * d)[:, None] * a_hat[None, :]).ravel()

    rho0 = np.sqrt(np.linalg.norm(state.theta_tilde) / (np.linalg.norm(jx) + UORO_EPS)) + UORO_EPS
    rho1 = np.sqrt(np.linalg.norm(nu_p) / (np.linalg.norm(nu) + UORO_EPS)) + UORO_EPS
    state.x_tilde = rho0 * jx + rho1 * nu
    state.theta_tilde = state.theta_tilde / rho0 + nu_p / rho1

    g_rec = ((credit @ state.x_tilde) * state.theta_tilde).reshape(q, state.n_rec)
    state.x = x_new
    _apply_network_update(state, g_rec, np.outer(e2, x_new), eta)
    _check_finite(state.W_a, state.W_b, state.W_c, state.x, state.x_tilde, state.theta_tilde)
    return state, y


def train_step_snap1(state: RnnState, u: np.ndarray, target: np.ndarray,
                     eta: float) -> Tuple[RnnState, np.ndarray]:
    _, x_new, y, a_hat, d, e2, credit = _step_setup(state, u, target)

    # each recurrent weight only tracks its effect on the unit it feeds
    jac_diag = d * np.diag(state.W_a)
    state.influence = jac_diag[:, None] * state.influence + d[:, None] * a_hat[None, :]

    g_rec = credit[:, None] * state.influence
    state.x = x_new
    _apply_network_update(state, g_rec, np.outer(e2, x_new), eta)
    _check_finite(state.W_a, state.W_b, state.W_c, state.x, state.influence)
    return state, y


def train_step_dni(state: RnnState, u: np.ndarray, target: np.ndarray,
                   eta: float) -> Tuple[RnnState, np.ndarray]:
    x_prev, x_new, y, a_hat, d, e2, credit = _step_setup(state, u, target)

    synthetic_next = state.A @ np.append(x_new, 1.0)
    total_credit = credit + synthetic_next
    g_rec = (total_credit * d)[:, None] * a_hat[None, :]

    # one-step bootstrap: credit of x_n = (dL_n/dx_{n+1} + c(x_{n+1})) J_n
    aug_prev = np.append(x_prev, 1.0)
    bootstrap = total_credit @ (d[:, None] * state.W_a)
    g_A = 2.0 * np.outer(state.A @ aug_prev - bootstrap, aug_prev)
    state.A = state.A - eta * clip_gradient(g_A, TAU_RNN)

    state.x = x_new
    _apply_network_update(state, g_rec, np.outer(e2, x_new), eta)
    _check_finite(state.W_a, state.W_b, state.W_c, state.x, state.A)
    return state, y


def train_step_frozen(state: RnnState, u: np.ndarray, target: np.ndarray,
                      eta: float) -> Tuple[RnnState, np.ndarray]:
    """Hidden layer fixed at initialization; only the readout learns."""
    _, x_new, y, _, _, e2, _ = _step_setup(state, u, target)
    state.x = x_new
    _apply_network_update(state, None, np.outer(e2, x_new), eta)
    _check_finite(state.W_c, state.x)
    return state, y


# ---------------------------------------------------------------------------
# Linear forecasters
# ---------------------------------------------------------------------------

@dataclass
class LmsState:
    W: np.ndarray   # (p, m + 1)


def init_lms_state(m: int, p: int) -> LmsState:
    return LmsState(W=np.zeros((p, m + 1)))


def train_step_lms(state: LmsState, u: np.ndarray, target: np.ndarray,
                   eta: float) -> Tuple[LmsState, np.ndarray]:
    y = state.W @ u
    error = np.asarray(target, dtype=np.float64) - y
    state.W = state.W + eta * clip_gradient(np.outer(error, u), TAU_LMS)
    return state, y


@dataclass(frozen=True)
class LinRegModel:
    W: np.ndarray   # (p, m + 1)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return np.asarray(inputs) @ self.W.T


def fit_linear_regression(pairs: SupervisedPairs) -> LinRegModel:
    if len(pairs) < 1:
        raise ForecastError("linear regression needs at least one training pair")
    # lstsq under the hood: minimum-norm solution when rank deficient
    reg = LinearRegression(fit_intercept=False)
    reg.fit(pairs.inputs, pairs.targets)
    return LinRegModel(W=np.atleast_2d(reg.coef_))


def predict_baseline_previous(weights: np.ndarray, h: int) -> np.ndarray:
    """w_hat(t_{k+h}) = w(t_k); rows without a source are NaN."""
    weights = np.asarray(weights, dtype=np.float64)
    if h < 0:
        raise ForecastError(f"horizon must be >= 0, got {h}")
    pred = np.full_like(weights, np.nan)
    pred[h:] = weights[:len(weights) - h]
    return pred


# ---------------------------------------------------------------------------
# Running a method over a weight series
# ---------------------------------------------------------------------------

RNN_STEPS: Dict[str, Callable] = {
    "rtrl": train_step_rtrl,
    "snap1": train_step_snap1,
    "dni": train_step_dni,
    "frozen_rnn": train_step_frozen,
}


@dataclass(frozen=True)
class ForecastResult:
    predictions: np.ndarray     # (M, n_cp), NaN where no pair targets the frame
    stats: NormalizationStats
    target_frames: np.ndarray


def forecast_series(method: str, weights: np.ndarray, L: int, h: int, m_train: int,
                    eta: float = 0.01, q: int = 10, seed: int = 0,
                    last_frame: Optional[int] = None,
                    reset_after: Optional[int] = None) -> ForecastResult:
    """Predict frames L+h..last_frame of a weight series with one method.

    Online methods predict each pair before learning from it. Normalization
    stats come from pairs whose target frame is <= m_train; linear regression
    is fitted on exactly those pairs. With reset_after set, hidden state and
    sensitivity structures are zeroed before the first target beyond that frame.
    """
    if method not in METHODS:
        raise ForecastError(f"unknown forecasting method '{method}'")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[:, None]
    n_frames, p = weights.shape
    last = n_frames if last_frame is None else last_frame

    pairs = make_supervised_pairs(weights[:last], L, h)
    train_mask = pairs.target_frames <= m_train
    if not train_mask.any():
        raise ForecastError(f"no training pairs with L={L}, h={h} and m_train={m_train}")
    stats = NormalizationStats.from_inputs(pairs.inputs[train_mask], n_outputs=p)
    normed = normalize_pairs(pairs, stats)
    m = normed.inputs.shape[1] - 1

    if method == "linreg":
        outputs = fit_linear_regression(normed.subset(train_mask)).predict(normed.inputs)
    else:
        rng = np.random.default_rng(seed)
        if method == "lms":
            state = init_lms_state(m, p)
        else:
            state = init_rnn_state(method, q, m, p, rng)
        outputs = np.empty_like(normed.targets)
        reset_pending = reset_after is not None and method != "lms"
        for i, (u, y) in enumerate(normed):
            if reset_pending and normed.target_frames[i] > reset_after:
                state.reset_memory()
                reset_pending = False
            if method == "lms":
                state, outputs[i] = train_step_lms(state, u, y, eta)
            elif method == "uoro":
                state, outputs[i] = train_step_uoro(state, u, y, eta, rng)
            else:
                state, outputs[i] = RNN_STEPS[method](state, u, y, eta)

    predictions = np.full((n_frames, p), np.nan)
    predictions[pairs.target_frames - 1] = denormalize(outputs, stats)
    logger.debug("%s L=%d h=%d eta=%s q=%d seed=%d: %d predictions", method, L, h, eta, q, seed, len(pairs))
    return ForecastResult(predictions=predictions, stats=stats, target_frames=pairs.target_frames)
