"""Compiled online training loop exploiting sparse activity.

Momentum ascent ``v <- g v + (1-g) grad; w <- w + alpha v`` touches every
weight each step even though the gradient of one example is nonzero only on
(active inputs) x (active units). The loop keeps two equivalent quantities
instead of ``(w, v)``:

    z = w + a v,    a = alpha g / (1 - g)     ->  z <- z + alpha grad
    v = s V                                   ->  s <- g s;  V <- V + (1-g)/s grad

Both updates are as sparse as the gradient, and ``w = z - a s V`` is formed on
the fly where needed. ``V`` is renormalized when ``s`` underflows toward
zero. Layer ``l`` is stored transposed as an ``(n_in + 1, n_out)`` block of a
flat buffer, last row holding the bias.
"""
import numpy as np
from numba import njit

from .network import LRDI, GRDI, EpochMetrics, DivergenceError

_MODE_CODES = {"umax": 0, LRDI: 1, GRDI: 2}


def _layout(sizes):
    offs = [0]
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        offs.append(offs[-1] + (n_in + 1) * n_out)
    return np.array(offs, dtype=np.int64)


def pack(params, velocity, a):
    z_parts, v_parts = [], []
    for w, b, vw, vb in zip(params.weights, params.biases, velocity.weights, velocity.biases):
        wt = np.vstack([w.T, b[None, :]])
        vt = np.vstack([vw.T, vb[None, :]])
        z_parts.append((wt + a * vt).ravel())
        v_parts.append(vt.ravel())
    return np.concatenate(z_parts), np.concatenate(v_parts)


def unpack_into(params, velocity, z, v_scaled, s, a):
    sizes = params.sizes
    offs = _layout(sizes)
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        zt = z[offs[l]:offs[l + 1]].reshape(n_in + 1, n_out)
        vt = s * v_scaled[offs[l]:offs[l + 1]].reshape(n_in + 1, n_out)
        wt = zt - a * vt
        params.weights[l][...] = wt[:n_in].T
        params.biases[l][...] = wt[n_in]
        velocity.weights[l][...] = vt[:n_in].T
        velocity.biases[l][...] = vt[n_in]


@njit(cache=True, fastmath={"reassoc", "contract"})
def _epoch_kernel(X, labels, order, sizes, offs, Z, V, s, a, alpha, gamma,
                  mode, beta, eps, tau, hmeans, omeans, warm, stats):
    L = sizes.shape[0] - 1
    total = 0
    for l in range(L + 1):
        total += sizes[l]
    # per-level buffers: level 0 = input, 1..L-1 hidden, L output
    aoff = np.zeros(L + 2, dtype=np.int64)
    for l in range(L + 1):
        aoff[l + 1] = aoff[l] + sizes[l]
    rate = np.zeros(total)
    pre = np.zeros(total)
    idx = np.zeros(total, dtype=np.int64)
    nact = np.zeros(L + 1, dtype=np.int64)
    g = np.zeros(total)     # backpropagated signal
    gu = np.zeros(total)    # signal used for the weight update
    hoff = np.zeros(L + 1, dtype=np.int64)
    for l in range(1, L):
        hoff[l + 1] = hoff[l] + sizes[l]
    nout_last = sizes[L]
    keep = 1.0 / tau
    util = 0.0
    errs = 0.0
    mi = 0.0
    ent = 0.0
    zs = 1.0

    for step in range(order.shape[0]):
        k = order[step]
        label = labels[k]
        c = a * s
        # input level
        n0 = sizes[0]
        cnt = 0
        for i in range(n0):
            xi = X[k, i]
            rate[i] = xi
            if xi != 0.0:
                idx[cnt] = i
                cnt += 1
        nact[0] = cnt
        # forward
        for l in range(L):
            n_in = sizes[l]
            n_out = sizes[l + 1]
            base = offs[l]
            ib = aoff[l]
            ob = aoff[l + 1]
            bias = base + n_in * n_out
            out = pre[ob:ob + n_out]
            zr = Z[bias:bias + n_out]
            vr = V[bias:bias + n_out]
            for j in range(n_out):
                out[j] = zr[j] - c * vr[j]
            for q in range(nact[l]):
                i = idx[ib + q]
                hi = rate[ib + i]
                row = base + i * n_out
                zr = Z[row:row + n_out]
                vr = V[row:row + n_out]
                for j in range(n_out):
                    out[j] += hi * (zr[j] - c * vr[j])
            if l < L - 1:
                cnt = 0
                for j in range(n_out):
                    v = pre[ob + j]
                    if v > 0.0:
                        rate[ob + j] = v
                        idx[ob + cnt] = j
                        cnt += 1
                    else:
                        rate[ob + j] = 0.0
                nact[l + 1] = cnt
            else:
                top = pre[ob]
                for j in range(1, n_out):
                    if pre[ob + j] > top:
                        top = pre[ob + j]
                zs = 0.0
                for j in range(n_out):
                    e = np.exp(pre[ob + j] - top)
                    rate[ob + j] = e
                    zs += e
                for j in range(n_out):
                    rate[ob + j] /= zs
                nact[l + 1] = n_out
                for j in range(n_out):
                    idx[ob + j] = j
        fb = aoff[L]
        if not warm:
            for l in range(1, L):
                for j in range(sizes[l]):
                    hmeans[hoff[l] + j] = rate[aoff[l] + j]
            for j in range(nout_last):
                omeans[j] = rate[fb + j]
            warm = True
        # online metrics with pre-step parameters
        fl = rate[fb + label]
        u = np.log(max(fl, eps))
        if not np.isfinite(u) or not np.isfinite(zs):
            stats[4] = k
            return s, warm, step
        util += u
        best = 0
        for j in range(1, nout_last):
            if rate[fb + j] > rate[fb + best]:
                best = j
        if best != label:
            errs += 1.0
        for j in range(nout_last):
            f = rate[fb + j]
            mi += f * (np.log(max(f, eps)) - np.log(max(omeans[j], eps)))
            if f > 0.0:
                ent -= f * np.log(f)
        # output error e_j and its softmax backprop
        ef = 0.0
        for j in range(nout_last):
            f = rate[fb + j]
            du = 1.0 / max(fl, eps) if j == label else 0.0
            if mode == 0:
                e = du
            elif mode == 1:
                e = (1.0 - beta) * du
            else:
                e = (1.0 - beta) * du - beta * (np.log(max(f, eps)) - np.log(max(omeans[j], eps)))
            g[fb + j] = e
            ef += e * f
        for j in range(nout_last):
            g[fb + j] = rate[fb + j] * (g[fb + j] - ef)
            gu[fb + j] = g[fb + j]
        s_new = gamma * s
        kv = (1.0 - gamma) / s_new
        for l in range(L - 1, -1, -1):
            n_in = sizes[l]
            n_out = sizes[l + 1]
            base = offs[l]
            ib = aoff[l]
            ob = aoff[l + 1]
            bias = base + n_in * n_out
            # signal to the layer below, with pre-step weights
            # signals of inactive units are exactly zero, so rows are swept densely
            gs = g[ob:ob + n_out]
            gus = gu[ob:ob + n_out]
            if l > 0:
                for i in range(n_in):
                    g[ib + i] = 0.0
                    gu[ib + i] = 0.0
                for q in range(nact[l]):
                    i = idx[ib + q]
                    row = base + i * n_out
                    zr = Z[row:row + n_out]
                    vr = V[row:row + n_out]
                    acc = 0.0
                    for j in range(n_out):
                        acc += (zr[j] - c * vr[j]) * gs[j]
                    g[ib + i] = acc
                    gu[ib + i] = acc
                if mode == 1:
                    for q in range(nact[l]):
                        i = idx[ib + q]
                        lr = np.log(max(rate[ib + i], eps)) - np.log(max(hmeans[hoff[l] + i], eps))
                        gu[ib + i] = g[ib + i] - beta * lr
            # rank-one update of the rows with nonzero input
            zr = Z[bias:bias + n_out]
            vr = V[bias:bias + n_out]
            for j in range(n_out):
                zr[j] += alpha * gus[j]
                vr[j] += kv * gus[j]
            for q in range(nact[l]):
                i = idx[ib + q]
                hi = rate[ib + i]
                row = base + i * n_out
                zr = Z[row:row + n_out]
                vr = V[row:row + n_out]
                ha = alpha * hi
                hk = kv * hi
                for j in range(n_out):
                    zr[j] += ha * gus[j]
                    vr[j] += hk * gus[j]
        s = s_new
        if s < 1e-100:
            for m in range(V.shape[0]):
                V[m] *= s
            s = 1.0
        # running means with the pre-step rates
        for l in range(1, L):
            for j in range(sizes[l]):
                hmeans[hoff[l] + j] = (1.0 - keep) * hmeans[hoff[l] + j] + keep * rate[aoff[l] + j]
        for j in range(nout_last):
            omeans[j] = (1.0 - keep) * omeans[j] + keep * rate[fb + j]

    stats[0] = util
    stats[1] = errs
    stats[2] = mi
    stats[3] = ent
    return s, warm, order.shape[0]


def run_epoch(params, velocity, means, dataset, reg, opt, order, alpha):
    """Drop-in for the reference epoch; mutates ``params``, ``velocity`` and ``means``."""
    sizes = np.array(params.sizes, dtype=np.int64)
    a = alpha * opt.gamma / (1.0 - opt.gamma)
    z, v = pack(params, velocity, a)
    hmeans = np.concatenate([h for h in means.hidden] + [np.zeros(0)])
    omeans = means.output.copy()
    stats = np.zeros(5)
    stats[4] = -1
    X = np.ascontiguousarray(dataset.images, dtype=np.float64)
    labels = np.ascontiguousarray(dataset.labels, dtype=np.int64)
    s, warm, steps = _epoch_kernel(
        X, labels, np.ascontiguousarray(order, dtype=np.int64), sizes, _layout(params.sizes),
        z, v, 1.0, a, float(alpha), float(opt.gamma), _MODE_CODES[reg.mode], float(reg.beta),
        float(reg.epsilon), float(reg.tau), hmeans, omeans, bool(means.warm), stats,
    )
    if stats[4] >= 0:
        raise DivergenceError(f"non-finite utility at example {int(stats[4])}", index=int(stats[4]))
    unpack_into(params, velocity, z, v, s, a)
    if not params.is_finite():
        raise DivergenceError("non-finite parameters after epoch")
    splits = np.cumsum([0] + list(params.sizes[1:-1]))
    means.hidden = [hmeans[splits[i]:splits[i + 1]].copy() for i in range(len(splits) - 1)]
    means.output = omeans
    means.warm = warm
    n = len(order)
    return EpochMetrics(stats[0] / n, stats[1] / n, stats[2] / n, stats[3] / n, n)
