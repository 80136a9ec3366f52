"""Feedforward rate networks with mutual-information regularized backprop.

Hidden layers are rectified-linear, the output layer is a softmax read as
the event probabilities of a categorical decision. Training is online
gradient *ascent* on the log-likelihood utility ``ln f_label`` with one of
three regularization modes:

``umax``
    plain utility maximization.
``lrdi``
    every hidden neuron pays its own mutual-information rate
    ``<phi ln(phi/phi_bar)>``; the penalty gradient stays local to the neuron.
``grdi``
    the network pays the mutual information between input and categorical
    output; implemented by replacing the backpropagated output error.

Weights are stored as ``(n_out, n_in)`` matrices, one per layer.
"""
from dataclasses import dataclass, field

import numpy as np

from .neuron import EPS, clamped_log_ratio, update_means

UMAX = "umax"
LRDI = "lrdi"
GRDI = "grdi"
MODES = (UMAX, LRDI, GRDI)


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Training produced a non-finite quantity."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass
class NetworkParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias vector per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: weight {w.shape} and bias {b.shape} do not match")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(f"layer {l} expects {w.shape[1]} inputs, previous layer has {self.weights[l - 1].shape[0]}")

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def depth(self):
        return len(self.weights)

    def copy(self):
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return NetworkParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def scaled(self, k):
        return NetworkParams([k * w for w in self.weights], [k * b for b in self.biases])

    def __add__(self, other):
        return NetworkParams(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def __sub__(self, other):
        return self + other.scaled(-1.0)


@dataclass
class ForwardTrace:
    """Everything a backward pass needs.

    ``inputs[l]`` holds the presynaptic rates of layer ``l``'s neurons
    (``inputs[0]`` is the network input), ``pre[l]`` their pre-activations.
    """

    inputs: list
    pre: list
    output: np.ndarray

    @property
    def hidden(self):
        return self.inputs[1:]


@dataclass
class MeanBank:
    """Running mean rates: one per hidden neuron and one per output unit."""

    hidden: list
    output: np.ndarray
    tau: float = 1000.0
    warm: bool = False

    @classmethod
    def for_sizes(cls, sizes, tau=1000.0):
        return cls([np.zeros(n) for n in sizes[1:-1]], np.zeros(sizes[-1]), float(tau))

    def copy(self):
        return MeanBank([h.copy() for h in self.hidden], self.output.copy(), self.tau, self.warm)

    def warm_up(self, trace):
        """Start every running mean at the rates of ``trace`` (first example)."""
        self.hidden = [h.copy() for h in trace.hidden]
        self.output = trace.output.copy()
        self.warm = True

    def update(self, trace):
        self.hidden = [update_means(m, h, self.tau) for m, h in zip(self.hidden, trace.hidden)]
        self.output = update_means(self.output, trace.output, self.tau)


@dataclass(frozen=True)
class RegularizerConfig:
    mode: str = UMAX
    beta: float = 0.0
    tau: float = 1000.0
    epsilon: float = EPS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == UMAX and self.beta != 0:
            raise ValueError("umax has no information term; beta must be 0")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.tau >= 1:
            raise ValueError("tau must be >= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    alpha: float = 0.01
    gamma: float = 0.9
    eta: float = 0.002
    epochs: int = 70
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")


@dataclass
class EpochMetrics:
    """Online statistics gathered during one pass, before each weight update."""

    utility: float
    error: float
    global_mi: float
    mean_output_entropy: float
    steps: int
    extra: dict = field(default_factory=dict)


def init_weights(sizes, seed=0):
    """Uniform init in (-n_in**-0.5, n_in**-0.5) for weights and biases alike."""
    sizes = [int(n) for n in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeError(f"invalid architecture {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        r = n_in ** -0.5
        weights.append(rng.uniform(-r, r, size=(n_out, n_in)))
        biases.append(rng.uniform(-r, r, size=n_out))
    return NetworkParams(weights, biases)


def zero_params(sizes):
    return NetworkParams(
        [np.zeros((n_out, n_in)) for n_in, n_out in zip(sizes[:-1], sizes[1:])],
        [np.zeros(n) for n in sizes[1:]],
    )


def softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.sizes[0],):
        raise ShapeError(f"input has shape {x.shape}, network expects ({params.sizes[0]},)")
    inputs, pre = [x], []
    h = x
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = w @ h + b
        pre.append(a)
        if l < params.depth - 1:
            h = np.maximum(a, 0.0)
            inputs.append(h)
    out = softmax(pre[-1])
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite activations in forward pass")
    return ForwardTrace(inputs, pre, out)


def forward_batch(params, X, chunk=4096):
    """Output rates for every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], params.sizes[-1]))
    for start in range(0, X.shape[0], chunk):
        h = X[start:start + chunk]
        for l, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ w.T + b
            if l < params.depth - 1:
                np.maximum(h, 0.0, out=h)
        out[start:start + chunk] = softmax(h)
    return out


def utility_cross_entropy(trace, label, epsilon=EPS):
    """ln max{f_label, epsilon}."""
    return float(np.log(max(trace.output[label], epsilon)))


def utility_derivative(trace, label, epsilon=EPS):
    """dU/df_j for the log-likelihood utility (clamped denominator)."""
    d = np.zeros_like(trace.output)
    d[label] = 1.0 / max(trace.output[label], epsilon)
    return d


def _output_means(means):
    return means.output if isinstance(means, MeanBank) else np.asarray(means, dtype=np.float64)


def grdi_output_delta(trace, label, beta, means, epsilon=EPS):
    """Replacement for dU/df_j: (1-beta) dU/df_j - beta ln(f_j / f_bar_j)."""
    info = clamped_log_ratio(trace.output, _output_means(means), epsilon)
    return (1.0 - beta) * utility_derivative(trace, label, epsilon) - beta * info


def backprop(params, trace, output_delta, local=None):
    """Gradient of sum_j e_j f_j with e = ``output_delta`` held fixed.

    ``local``, if given, lists one extra per-neuron signal for each hidden
    layer. It is added to that layer's weight gradient but is *not*
    propagated further down.
    """
    e = np.asarray(output_delta, dtype=np.float64)
    f = trace.output
    if e.shape != f.shape:
        raise ShapeError(f"output delta has shape {e.shape}, network output {f.shape}")
    grads_w = [None] * params.depth
    grads_b = [None] * params.depth
    g = f * (e - e @ f)
    for l in range(params.depth - 1, -1, -1):
        g_update = g if local is None or l == params.depth - 1 else g + local[l]
        grads_w[l] = np.outer(g_update, trace.inputs[l])
        grads_b[l] = g_update
        if l:
            g = (params.weights[l].T @ g) * (trace.pre[l - 1] > 0)
    return NetworkParams(grads_w, grads_b)


def hidden_information_signals(trace, means, epsilon=EPS):
    """Per hidden neuron: phi'(a) (ln max{phi, eps} - ln max{phi_bar, eps})."""
    return [
        (a > 0) * clamped_log_ratio(phi, m, epsilon)
        for a, phi, m in zip(trace.pre, trace.hidden, means.hidden)
    ]


def local_information_gradient(params, trace, means, epsilon=EPS):
    """Gradient of each hidden neuron's MI rate with respect to its own weights."""
    signals = hidden_information_signals(trace, means, epsilon)
    grads_w = [np.zeros_like(w) for w in params.weights]
    grads_b = [np.zeros_like(b) for b in params.biases]
    for l, s in enumerate(signals):
        grads_w[l] = np.outer(s, trace.inputs[l])
        grads_b[l] = s.copy()
    return NetworkParams(grads_w, grads_b)


def lrdi_gradient(params, trace, label, beta, means, epsilon=EPS):
    """Shared utility gradient plus each hidden neuron's local information penalty."""
    utility = (1.0 - beta) * utility_derivative(trace, label, epsilon)
    local = [-beta * s for s in hidden_information_signals(trace, means, epsilon)]
    return backprop(params, trace, utility, local=local)


def mode_gradient(params, trace, label, reg, means):
    eps = reg.epsilon
    if reg.mode == UMAX:
        return backprop(params, trace, utility_derivative(trace, label, eps))
    if reg.mode == GRDI:
        return backprop(params, trace, grdi_output_delta(trace, label, reg.beta, means, eps))
    return lrdi_gradient(params, trace, label, reg.beta, means, eps)


def _outputs(traces):
    if isinstance(traces, np.ndarray):
        return np.atleast_2d(traces)
    return np.array([t.output for t in traces])


def global_mi_estimate(traces, means, epsilon=EPS):
    """Batch average of sum_j f_j (ln max{f_j,eps} - ln max{f_bar_j,eps}).

    ``traces`` is a sequence of :class:`ForwardTrace` or an ``(n, k)`` array
    of output rates; ``means`` a :class:`MeanBank` or a vector of mean rates.
    """
    f = _outputs(traces)
    if f.shape[0] == 0:
        raise ValueError("empty batch")
    return float(np.mean(np.sum(f * clamped_log_ratio(f, _output_means(means), epsilon), axis=1)))


def output_entropy(traces):
    """Mean entropy of the categorical output distributions, in nats."""
    f = _outputs(traces)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(f > 0, f * np.log(f), 0.0)
    return float(-np.mean(np.sum(plogp, axis=1)))


def sgd_momentum_step(params, velocity, gradient, cfg, alpha=None):
    """Momentum gradient *ascent*; ``params`` and ``velocity`` are updated in place.

    v <- gamma v + (1 - gamma) g;  w <- w + alpha v
    """
    alpha = cfg.alpha if alpha is None else alpha
    if not gradient.is_finite():
        bad = [i for i, a in enumerate(gradient.arrays()) if not np.all(np.isfinite(a))]
        raise DivergenceError(f"non-finite gradient in parameter arrays {bad}")
    for w, v, g in zip(params.arrays(), velocity.arrays(), gradient.arrays()):
        if w.shape != g.shape or v.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {w.shape}")
        v *= cfg.gamma
        v += (1.0 - cfg.gamma) * g
        w += alpha * v
    return params, velocity


def lr_decay(alpha, t, eta):
    """alpha / (1 + t eta), applied once after epoch ``t`` (counting from 1)."""
    if t < 1:
        raise ValueError("epoch index starts at 1")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return alpha / (1.0 + t * eta)


def max_norm_project(params, cap):
    """Rescale every neuron's incoming weight vector to Euclidean norm <= cap (biases untouched)."""
    if not cap > 0:
        raise ValueError("cap must be positive")
    out = params.copy()
    for w in out.weights:
        norms = np.sqrt(np.sum(w * w, axis=1))
        over = norms > cap
        w[over] *= (cap / norms[over])[:, None]
    return out


def evaluate(params, dataset, epsilon=EPS):
    """Mean utility, classification error and output rates on a dataset.

    Ties in the argmax resolve to the lowest class index.
    """
    f = forward_batch(params, dataset.images)
    labels = dataset.labels
    utility = float(np.mean(np.log(np.maximum(f[np.arange(len(labels)), labels], epsilon))))
    error = float(np.mean(np.argmax(f, axis=1) != labels))
    return utility, error, f


def _check_dataset(params, dataset):
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    if dataset.images.shape[1] != params.sizes[0]:
        raise ShapeError(f"dataset has {dataset.images.shape[1]} features, network expects {params.sizes[0]}")
    if dataset.labels.max() >= params.sizes[-1]:
        raise ShapeError("label out of range for the output layer")


def _train_epoch_reference(params, velocity, means, dataset, reg, opt, order, alpha, max_norm):
    eps = reg.epsilon
    util = err = mi = ent = 0.0
    for step, k in enumerate(order):
        label = int(dataset.labels[k])
        trace = forward(params, dataset.images[k])
        if not means.warm:
            means.warm_up(trace)
        f = trace.output
        u = utility_cross_entropy(trace, label, eps)
        if not np.isfinite(u):
            raise DivergenceError(f"non-finite utility at example {k}", index=int(k))
        util += u
        err += float(np.argmax(f) != label)
        mi += float(f @ clamped_log_ratio(f, means.output, eps))
        ent -= float(np.sum(f[f > 0] * np.log(f[f > 0])))
        grad = mode_gradient(params, trace, label, reg, means)
        try:
            sgd_momentum_step(params, velocity, grad, opt, alpha=alpha)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at example {k}", index=int(k)) from None
        if max_norm is not None:
            projected = max_norm_project(params, max_norm)
            for w, p in zip(params.weights, projected.weights):
                w[...] = p
        means.update(trace)
    n = len(order)
    return EpochMetrics(util / n, err / n, mi / n, ent / n, n)


def train_epoch(params, velocity, means, dataset, reg, opt, rng=None, alpha=None,
                max_norm=None, engine="auto"):
    """One shuffled online pass over ``dataset``.

    Per example: forward, mode gradient with frozen running means, momentum
    step, then running-mean update with the pre-step rates. The first
    example of a fresh :class:`MeanBank` initializes the means to its rates.

    ``engine`` selects the plain numpy implementation (``"reference"``), the
    compiled sparse one (``"fast"``), or the fast one whenever it applies
    (``"auto"``: momentum > 0 and no max-norm constraint).

    Returns new ``(params, velocity, means, metrics)``; inputs are not modified.
    """
    _check_dataset(params, dataset)
    alpha = opt.alpha if alpha is None else alpha
    if rng is None:
        rng = np.random.default_rng(opt.seed)
    order = rng.permutation(len(dataset.labels))
    params, velocity, means = params.copy(), velocity.copy(), means.copy()
    fast_ok = opt.gamma > 0 and max_norm is None
    if engine == "fast" and not fast_ok:
        raise ValueError("the fast engine needs gamma > 0 and no max-norm constraint")
    if engine == "reference" or (engine == "auto" and not fast_ok):
        metrics = _train_epoch_reference(params, velocity, means, dataset, reg, opt, order, alpha, max_norm)
    else:
        from ._engine import run_epoch
        metrics = run_epoch(params, velocity, means, dataset, reg, opt, order, alpha)
    return params, velocity, means, metrics
