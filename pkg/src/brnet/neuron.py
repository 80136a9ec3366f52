"""Single neurons as bounded-rational decision-makers.

Two neuron models share one gradient-ascent contract:

* a stochastic binary neuron firing with probability ``rho(w.x)``;
* a deterministic rate neuron with firing rate ``phi(w.xi)``, whose
  information cost is a mutual-information *rate* ``<phi ln(phi / phi_bar)>``.

Batches are 2-d arrays with one input per row, weighted equally. A batch of
one row gives the online rule.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import DimensionError

EPS = float(np.finfo(np.float64).eps)


@dataclass(frozen=True)
class RunningMean:
    """Exponential-window estimate of a mean rate with horizon ``tau`` steps."""

    value: float
    tau: float

    def __post_init__(self):
        if not self.tau >= 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")

    def update(self, sample):
        return running_mean_update(self, sample)


def running_mean_update(m, sample):
    if not m.tau >= 1:
        raise ValueError(f"tau must be >= 1, got {m.tau}")
    k = 1.0 / m.tau
    return RunningMean((1.0 - k) * m.value + k * float(sample), m.tau)


def update_means(values, samples, tau):
    """Vectorized :func:`running_mean_update`; returns a new array."""
    if not tau >= 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    k = 1.0 / tau
    return (1.0 - k) * values + k * samples


@dataclass(frozen=True)
class Activation:
    kind: str
    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]

    def __call__(self, a):
        return self.eval(a)


def _sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _sigmoid_deriv(a):
    s = _sigmoid(a)
    return s * (1.0 - s)


def _relu(a):
    return np.maximum(np.asarray(a, dtype=np.float64), 0.0)


def _relu_deriv(a):
    # subgradient 0 at the kink
    return (np.asarray(a) > 0).astype(np.float64)


SIGMOID = Activation("sigmoid", _sigmoid, _sigmoid_deriv)
RELU = Activation("rectified-linear", _relu, _relu_deriv)


def custom_activation(eval, deriv):
    return Activation("custom", eval, deriv)


def _batch(w, batch):
    w = np.asarray(w, dtype=np.float64)
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if w.ndim != 1:
        raise DimensionError("weights must be a vector")
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if batch.shape[1] != w.shape[0]:
        raise DimensionError(f"inputs have dimension {batch.shape[1]}, weights {w.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w, batch


def _per_input(values, n, name):
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), (n,))
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} must be finite")
    return values


def stochastic_policy(w, x, act=SIGMOID):
    """Firing probability p(y=1|x) = rho(w.x) of a stochastic binary neuron."""
    w, x = _batch(w, x)
    if x.shape[0] != 1:
        raise DimensionError("stochastic_policy takes a single input vector")
    return float(act(x[0] @ w))


def stochastic_info_cost(rho, rho_bar, y):
    """Pointwise information cost ln p(y|x)/p(y) of a binary firing decision."""
    for name, v in (("rho", rho), ("rho_bar", rho_bar)):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")
    if y not in (0, 1):
        raise ValueError(f"y must be 0 or 1, got {y}")
    if y == 1:
        return float(np.log(rho) - np.log(rho_bar))
    return float(np.log1p(-rho) - np.log1p(-rho_bar))


def stochastic_gradient(w, batch, delta_u, beta, rho_bar, act=SIGMOID):
    """Rate-distortion gradient of a stochastic binary neuron.

    Parameters
    ----------
    w : array_like, shape (d,)
    batch : array_like, shape (n, d)
        Presynaptic inputs, equally weighted.
    delta_u : array_like, shape (n,)
        Utility of firing minus utility of staying silent, per input.
    beta : float
        Information price; ``beta = 0`` gives the plain reward-maximizing rule.
    rho_bar : float
        Mean firing probability, held constant for the step.
    """
    w, batch = _batch(w, batch)
    delta_u = _per_input(delta_u, batch.shape[0], "delta_u")
    if not 0.0 < rho_bar < 1.0:
        raise ValueError(f"rho_bar must lie strictly inside (0, 1), got {rho_bar}")
    a = batch @ w
    rho = act(a)
    log_odds = (np.log(rho) - np.log1p(-rho)) - (np.log(rho_bar) - np.log1p(-rho_bar))
    signal = act.deriv(a) * ((1.0 - beta) * delta_u - beta * log_odds)
    return batch.T @ signal / batch.shape[0]


def clamped_log_ratio(rate, mean, eps=EPS):
    """ln max{rate, eps} - ln max{mean, eps}."""
    return np.log(np.maximum(rate, eps)) - np.log(np.maximum(mean, eps))


def deterministic_mi_rate(w, batch, phi_bar, act=RELU, eps=EPS):
    """Mutual-information rate <phi ln(phi/phi_bar)> between inputs and firing state."""
    w, batch = _batch(w, batch)
    if not phi_bar > 0:
        raise ValueError(f"phi_bar must be positive, got {phi_bar}")
    phi = act(batch @ w)
    return float(np.mean(phi * clamped_log_ratio(phi, phi_bar, eps)))


def deterministic_gradient(w, batch, du_dphi, beta, phi_bar, act=RELU, eps=EPS):
    """Rate-distortion gradient of a deterministic rate neuron.

    ``du_dphi`` is the utility derivative with respect to the neuron's rate,
    one value per input. ``phi_bar`` is treated as a constant.
    """
    w, batch = _batch(w, batch)
    du_dphi = _per_input(du_dphi, batch.shape[0], "du_dphi")
    if not phi_bar > 0:
        raise ValueError(f"phi_bar must be positive, got {phi_bar}")
    a = batch @ w
    phi = act(a)
    signal = act.deriv(a) * ((1.0 - beta) * du_dphi - beta * clamped_log_ratio(phi, phi_bar, eps))
    return batch.T @ signal / batch.shape[0]
