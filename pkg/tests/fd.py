"""Finite-difference helpers shared by the network and acceptance tests."""
import numpy as np

from brnet.network import NetworkParams


def unflatten(template, vec):
    out, pos = [], 0
    for a in template.arrays():
        out.append(vec[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return NetworkParams(out[0::2], out[1::2])


def fd_gradient(objective, params, h=1e-5, coords=None):
    """Central differences of ``objective(params)`` at the chosen flat coordinates."""
    theta = params.flat()
    coords = range(theta.size) if coords is None else coords
    g = np.zeros(theta.size)
    for i in coords:
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (objective(unflatten(params, theta + e)) - objective(unflatten(params, theta - e))) / (2 * h)
    return g


def rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-300))


def hidden_rates(params, X):
    """Hidden rates of every layer for a batch, one (n, width) array per hidden layer."""
    rates, h = [], X
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if l < params.depth - 1:
            h = np.maximum(h, 0.0)
            rates.append(h)
    return rates


def output_rates(params, X):
    h = X
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if l < params.depth - 1:
            h = np.maximum(h, 0.0)
    e = np.exp(h - h.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def clog(x, eps=np.finfo(float).eps):
    return np.log(np.maximum(x, eps))


def grdi_objective(X, labels, beta, f_bar=None):
    """Batch mean of (1-beta) ln f_label - beta sum_j f_j ln(f_j / f_bar_j).

    With ``f_bar=None`` the mean output is recomputed from the batch.
    """
    def objective(params):
        f = output_rates(params, X)
        fb = f.mean(axis=0) if f_bar is None else f_bar
        u = clog(f[np.arange(len(labels)), labels])
        info = np.sum(f * (clog(f) - clog(fb)), axis=1)
        return float(np.mean((1 - beta) * u - beta * info))
    return objective


def summed_mi_rate(X):
    """Sum over hidden neurons of their MI rates, mean rates recomputed from the batch."""
    def objective(params):
        total = 0.0
        for phi in hidden_rates(params, X):
            total += float(np.sum(np.mean(phi * (clog(phi) - clog(phi.mean(axis=0))), axis=0)))
        return total
    return objective
