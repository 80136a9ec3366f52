import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brnet.data import nearest_centroid_error, synth_blobs
from brnet.network import (
    GRDI, LRDI, UMAX, DivergenceError, MeanBank, NetworkParams, OptimizerConfig,
    RegularizerConfig, ShapeError, backprop, evaluate, forward, forward_batch,
    global_mi_estimate, grdi_output_delta, init_weights, local_information_gradient,
    lr_decay, lrdi_gradient, max_norm_project, mode_gradient, output_entropy,
    sgd_momentum_step, train_epoch, utility_cross_entropy, utility_derivative, zero_params,
)
from conftest import needs_mnist
from fd import fd_gradient, grdi_objective, rel_err, summed_mi_rate


def trace_with_output(f):
    x = np.zeros(1)
    with np.errstate(divide="ignore"):
        logits = np.log(np.asarray(f, float))
    params = NetworkParams([np.zeros((len(f), 1))], [logits])
    return forward(params, x)


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def means_of(params, X):
    bank = MeanBank.for_sizes(params.sizes)
    traces = [forward(params, x) for x in X]
    bank.hidden = [np.mean([t.hidden[l] for t in traces], axis=0) for l in range(params.depth - 1)]
    bank.output = np.mean([t.output for t in traces], axis=0)
    bank.warm = True
    return bank, traces


def mean_grad(grads):
    total = grads[0]
    for g in grads[1:]:
        total = total + g
    return total.scaled(1.0 / len(grads))


@pytest.fixture
def small_net(rng):
    params = init_weights([4, 5, 3], seed=7)
    X = rng.uniform(0, 1, size=(6, 4))
    labels = rng.integers(0, 3, size=6)
    return params, X, labels


# forward

def test_forward_zero_params_uniform():
    t = forward(zero_params([784, 20, 20, 10]), np.full(784, 0.5))
    assert all(np.all(h == 0) for h in t.hidden)
    np.testing.assert_allclose(t.output, 0.1, atol=1e-16)


def test_forward_outputs_normalized(rng):
    for seed in range(1000):
        params = init_weights([6, 4, 5], seed=seed)
        params = params.scaled(rng.uniform(0.1, 20))
        f = forward(params, rng.uniform(0, 1, 6)).output
        assert abs(f.sum() - 1) <= 1e-12 and np.all(f >= 0)


def test_forward_hand_computed_2_3_2():
    w1 = np.array([[1.0, -1.0], [0.5, 0.5], [-2.0, 1.0]])
    b1 = np.array([0.0, 0.1, 0.5])
    w2 = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 1.0]])
    b2 = np.array([0.2, -0.2])
    x = np.array([0.6, 0.2])
    t = forward(NetworkParams([w1, w2], [b1, b2]), x)
    # a1 = [0.4, 0.5, -0.5] -> h = [0.4, 0.5, 0]; a2 = [0.6, 0.8]
    np.testing.assert_allclose(t.pre[0], [0.4, 0.5, -0.5], atol=1e-15)
    np.testing.assert_allclose(t.hidden[0], [0.4, 0.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(t.pre[1], [0.6, 0.8], atol=1e-15)
    e = np.exp(-0.2)
    np.testing.assert_allclose(t.output, [e / (1 + e), 1 / (1 + e)], atol=1e-15)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(init_weights([3, 2]), np.zeros(4))


def test_forward_batch_matches_forward(small_net):
    params, X, _ = small_net
    np.testing.assert_allclose(forward_batch(params, X, chunk=4), [forward(params, x).output for x in X], atol=1e-15)


# utility and output deltas

def test_utility_values():
    assert utility_cross_entropy(trace_with_output([0.0, 1.0]), 1) == 0.0
    assert utility_cross_entropy(trace_with_output([0.1] * 10), 3) == pytest.approx(np.log(0.1), abs=1e-12)
    assert utility_cross_entropy(trace_with_output([0.0, 1.0]), 0) == pytest.approx(-36.04, abs=0.01)


def test_grdi_delta_zero_beta_is_utility_derivative():
    t = trace_with_output([0.2, 0.5, 0.3])
    np.testing.assert_array_equal(grdi_output_delta(t, 1, 0.0, np.array([0.1, 0.1, 0.8])), utility_derivative(t, 1))


def test_grdi_delta_at_mean_has_no_information_part():
    t = trace_with_output([0.2, 0.5, 0.3])
    np.testing.assert_allclose(grdi_output_delta(t, 2, 0.4, t.output.copy()), 0.6 * utility_derivative(t, 2), atol=1e-15)


def test_grdi_delta_hand_value():
    d = grdi_output_delta(trace_with_output([0.7, 0.3]), 0, 0.2, np.array([0.5, 0.5]))
    np.testing.assert_allclose(d, [0.8 / 0.7 - 0.2 * np.log(1.4), -0.2 * np.log(0.6)], atol=1e-12)
    # 8/7 - 0.2 ln 1.4 = 1.142857 - 0.067294
    np.testing.assert_allclose(d, [1.075563, 0.102165], atol=1e-6)


# backprop

def test_backprop_zero_delta(small_net):
    params, X, _ = small_net
    g = backprop(params, forward(params, X[0]), np.zeros(3))
    assert all(np.all(a == 0) for a in g.arrays())


def test_backprop_shape_mismatch(small_net):
    params, X, _ = small_net
    with pytest.raises(ShapeError):
        backprop(params, forward(params, X[0]), np.zeros(4))


def test_backprop_matches_fd_of_utility(small_net):
    params, X, labels = small_net
    for x, label in zip(X, labels):
        objective = lambda p: utility_cross_entropy(forward(p, x), label)
        g = backprop(params, forward(params, x), utility_derivative(forward(params, x), label))
        assert rel_err(g.flat(), fd_gradient(objective, params, h=1e-5)) < 1e-5


def test_grdi_backprop_matches_fd_with_fixed_means(small_net):
    params, X, labels = small_net
    f_bar = np.array([0.5, 0.2, 0.3])
    beta = 0.3
    for x, label in zip(X[:3], labels[:3]):
        t = forward(params, x)
        g = backprop(params, t, grdi_output_delta(t, label, beta, f_bar))
        fd = fd_gradient(grdi_objective(x[None], np.array([label]), beta, f_bar), params, h=1e-5)
        assert rel_err(g.flat(), fd) < 1e-4


# Lrdi

def test_lrdi_zero_beta_equals_umax(small_net):
    params, X, labels = small_net
    bank, traces = means_of(params, X)
    for t, label in zip(traces, labels):
        assert same(lrdi_gradient(params, t, label, 0.0, bank), backprop(params, t, utility_derivative(t, label)))


def test_lrdi_inactive_neuron_has_no_information_gradient():
    params = init_weights([3, 4, 2], seed=1)
    params.weights[0][2] = -1.0
    params.biases[0][2] = -0.5
    x = np.array([0.2, 0.9, 0.4])
    t = forward(params, x)
    assert t.pre[0][2] < 0
    bank = MeanBank.for_sizes(params.sizes)
    bank.warm_up(t)
    bank.hidden[0] += 0.3
    info = local_information_gradient(params, t, bank)
    assert np.all(info.weights[0][2] == 0) and info.biases[0][2] == 0
    assert np.any(info.weights[0][0] != 0) or t.pre[0][0] <= 0


def test_lrdi_information_part_matches_fd(small_net):
    params, X, _ = small_net
    bank, traces = means_of(params, X)
    analytic = mean_grad([local_information_gradient(params, t, bank) for t in traces])
    fd = fd_gradient(summed_mi_rate(X), params, h=1e-6)
    assert rel_err(analytic.flat(), fd) < 1e-4


def test_lrdi_information_is_not_propagated(small_net):
    params, X, labels = small_net
    bank, traces = means_of(params, X)
    t, label = traces[0], labels[0]
    beta = 0.4
    g = lrdi_gradient(params, t, label, beta, bank)
    u = backprop(params, t, (1 - beta) * utility_derivative(t, label))
    info = local_information_gradient(params, t, bank)
    expected = u - info.scaled(beta)
    for a, b in zip(g.arrays(), expected.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_mode_equivalence_at_zero_beta(small_net):
    params, X, labels = small_net
    bank, traces = means_of(params, X)
    for t, label in zip(traces, labels):
        ref = mode_gradient(params, t, label, RegularizerConfig(UMAX), bank)
        for mode in (LRDI, GRDI):
            assert same(mode_gradient(params, t, label, RegularizerConfig(mode, 0.0), bank), ref)


# global MI and entropy

def test_global_mi_identical_at_mean():
    f = np.array([0.2, 0.3, 0.5])
    assert global_mi_estimate(np.tile(f, (5, 1)), f) == pytest.approx(0.0, abs=1e-16)


def test_global_mi_one_bit_limit():
    vals = []
    for e in (1e-2, 1e-4, 1e-8):
        vals.append(global_mi_estimate(np.array([[1 - e, e], [e, 1 - e]]), np.array([0.5, 0.5])))
    assert abs(vals[-1] - np.log(2)) < 1e-6
    assert abs(vals[0] - np.log(2)) > abs(vals[1] - np.log(2)) > abs(vals[2] - np.log(2))


def test_global_mi_double_sum(rng):
    f = rng.dirichlet(np.ones(4), size=7)
    fb = rng.dirichlet(np.ones(4))
    oracle = 0.0
    for row in f:
        for j in range(4):
            oracle += row[j] * (np.log(row[j]) - np.log(fb[j]))
    assert global_mi_estimate(f, fb) == pytest.approx(oracle / 7, abs=1e-12)


def test_global_mi_accepts_traces(small_net):
    params, X, _ = small_net
    bank, traces = means_of(params, X)
    assert global_mi_estimate(traces, bank) == pytest.approx(
        global_mi_estimate(np.array([t.output for t in traces]), bank.output), abs=1e-15)


def test_global_mi_empty_batch():
    with pytest.raises(ValueError):
        global_mi_estimate(np.zeros((0, 3)), np.full(3, 1 / 3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 30), st.floats(0.1, 50))
def test_global_mi_nonnegative_with_exact_mean(seed, n, sharp):
    f = np.random.default_rng(seed).dirichlet(np.full(5, 1.0 / sharp), size=n)
    assert global_mi_estimate(f, f.mean(axis=0)) >= -1e-12


def test_output_entropy_uniform():
    assert output_entropy(np.full((3, 4), 0.25)) == pytest.approx(np.log(4))
    assert output_entropy(np.array([[1.0, 0.0]])) == 0.0


# optimizer

def one_param(w=0.0, v=0.0):
    return NetworkParams([np.array([[w]])], [np.array([0.0])])


def test_momentum_hand_value():
    p, v = one_param(), one_param()
    g = NetworkParams([np.array([[1.0]])], [np.array([0.0])])
    sgd_momentum_step(p, v, g, OptimizerConfig(alpha=0.01, gamma=0.9))
    assert v.weights[0][0, 0] == pytest.approx(0.1, abs=1e-16)
    assert p.weights[0][0, 0] == pytest.approx(0.001, abs=1e-17)


def test_momentum_zero_gamma_is_plain_ascent():
    p, v = one_param(2.0), one_param()
    v.weights[0][0, 0] = 5.0
    g = NetworkParams([np.array([[3.0]])], [np.array([1.0])])
    sgd_momentum_step(p, v, g, OptimizerConfig(alpha=0.1, gamma=0.0))
    assert p.weights[0][0, 0] == pytest.approx(2.3)
    assert p.biases[0][0] == pytest.approx(0.1)


def test_momentum_velocity_decays_geometrically():
    p, v = one_param(), one_param()
    v.weights[0][0, 0] = 1.0
    zero = one_param()
    for k in range(1, 6):
        sgd_momentum_step(p, v, zero, OptimizerConfig(gamma=0.9))
        assert v.weights[0][0, 0] == pytest.approx(0.9 ** k, rel=1e-14)


def test_momentum_rejects_non_finite_gradient():
    g = NetworkParams([np.array([[np.nan]])], [np.array([0.0])])
    with pytest.raises(DivergenceError):
        sgd_momentum_step(one_param(), one_param(), g, OptimizerConfig())


def test_lr_decay():
    assert lr_decay(0.01, 5, 0.0) == 0.01
    assert lr_decay(0.01, 1, 0.002) == pytest.approx(0.00998004, abs=1e-10)
    vals = [lr_decay(0.01, t, 0.002) for t in range(1, 20)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_decay(0.01, 0, 0.002)


@pytest.mark.parametrize("cfg", [dict(alpha=0.0), dict(gamma=1.0), dict(eta=-1.0)])
def test_optimizer_config_validation(cfg):
    with pytest.raises(ValueError):
        OptimizerConfig(**cfg)


def test_regularizer_config_validation():
    with pytest.raises(ValueError):
        RegularizerConfig(UMAX, 0.2)
    with pytest.raises(ValueError):
        RegularizerConfig(GRDI, 1.0)
    with pytest.raises(ValueError):
        RegularizerConfig(GRDI, 0.2, epsilon=0.0)
    with pytest.raises(ValueError):
        RegularizerConfig("dropout")


# init and max-norm

def test_init_bounds_and_determinism():
    p = init_weights([784, 30, 1, 3], seed=3)
    bound = 784 ** -0.5
    assert bound == pytest.approx(0.03571, abs=1e-5)
    assert np.all(np.abs(p.weights[0]) < bound) and np.all(np.abs(p.biases[0]) < bound)
    assert np.all(np.abs(p.weights[2]) < 1) and np.abs(p.weights[2]).max() > 0.2
    assert same(p, init_weights([784, 30, 1, 3], seed=3))
    assert not same(p, init_weights([784, 30, 1, 3], seed=4))


def test_max_norm_cases():
    w = np.array([[2.0, 0.0], [0.0, 7.0], [6.0 / np.sqrt(2), 6.0 / np.sqrt(2)]])
    p = NetworkParams([w], [np.array([100.0, 100.0, 100.0])])
    q = max_norm_project(p, 3.5)
    np.testing.assert_array_equal(q.weights[0][0], [2.0, 0.0])
    np.testing.assert_allclose(q.weights[0][1], [0.0, 3.5])
    np.testing.assert_allclose(np.linalg.norm(q.weights[0][2]), 3.5)
    np.testing.assert_array_equal(q.biases[0], 100.0)
    assert same(max_norm_project(q, 3.5), q)
    assert p.weights[0][1, 1] == 7.0


def test_max_norm_halves_entries():
    w = np.array([[2.0, 3.0, 6.0]])
    q = max_norm_project(NetworkParams([w], [np.zeros(1)]), 3.5)
    np.testing.assert_allclose(q.weights[0], w / 2, rtol=1e-15)


def test_max_norm_holds_during_training():
    data = synth_blobs(3, 30, 2, 0.5, seed=1)
    cap = 0.6
    params = init_weights([2, 8, 3], seed=0)
    velocity = params.zeros_like()
    bank = MeanBank.for_sizes(params.sizes, tau=50)
    reg = RegularizerConfig(GRDI, 0.2, tau=50)
    opt = OptimizerConfig(alpha=0.5, gamma=0.5)
    for k in range(len(data)):
        t = forward(params, data.images[k])
        if not bank.warm:
            bank.warm_up(t)
        sgd_momentum_step(params, velocity, mode_gradient(params, t, data.labels[k], reg, bank), opt)
        params = max_norm_project(params, cap)
        bank.update(t)
        for w in params.weights:
            assert np.all(np.linalg.norm(w, axis=1) <= cap + 1e-12)
    # the training loop applies the same projection
    p, *_ = train_epoch(params, velocity, bank, data, reg, opt, max_norm=cap)
    assert all(np.all(np.linalg.norm(w, axis=1) <= cap + 1e-12) for w in p.weights)


# training

@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(3, 100, 2, 0.5, seed=0)


def run(data, mode, beta, epochs=1, engine="auto", seed=0, sizes=(2, 16, 16, 3), alpha=0.05, tau=100.0):
    params = init_weights(list(sizes), seed=seed)
    velocity = params.zeros_like()
    bank = MeanBank.for_sizes(params.sizes, tau=tau)
    reg = RegularizerConfig(mode, beta, tau=tau)
    opt = OptimizerConfig(alpha=alpha, gamma=0.9, eta=0.002, seed=seed)
    rng = np.random.default_rng(seed)
    a = alpha
    out = []
    for t in range(1, epochs + 1):
        params, velocity, bank, m = train_epoch(params, velocity, bank, data, reg, opt, rng=rng, alpha=a, engine=engine)
        out.append(m)
        a = lr_decay(alpha, t, opt.eta)
    return params, velocity, bank, out


def test_train_epoch_does_not_mutate_inputs(blobs):
    params = init_weights([2, 4, 3], seed=0)
    before = params.copy()
    bank = MeanBank.for_sizes(params.sizes)
    train_epoch(params, params.zeros_like(), bank, blobs, RegularizerConfig(), OptimizerConfig())
    assert same(params, before) and not bank.warm


def test_umax_steps_follow_plain_backprop(blobs):
    data = blobs.subset(5)
    params = init_weights([2, 4, 3], seed=0)
    velocity = params.zeros_like()
    opt = OptimizerConfig(gamma=0.9)
    order = np.random.default_rng(0).permutation(5)
    p, v = params.copy(), velocity.copy()
    for k in order:
        t = forward(p, data.images[k])
        sgd_momentum_step(p, v, backprop(p, t, utility_derivative(t, data.labels[k])), opt)
    q, *_ = train_epoch(params, velocity, MeanBank.for_sizes(params.sizes), data, RegularizerConfig(), opt,
                        rng=np.random.default_rng(0), engine="reference")
    assert same(p, q)


@pytest.mark.parametrize("mode,beta", [(UMAX, 0.0), (LRDI, 0.3), (GRDI, 0.3)])
def test_fast_engine_matches_reference(blobs, mode, beta):
    pf, vf, bf, mf = run(blobs, mode, beta, epochs=2, engine="fast")
    pr, vr, br, mr = run(blobs, mode, beta, epochs=2, engine="reference")
    for a, b in zip(pf.arrays(), pr.arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    for a, b in zip(vf.arrays(), vr.arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(bf.output, br.output, rtol=1e-10)
    for x, y in zip(mf, mr):
        assert x.utility == pytest.approx(y.utility, rel=1e-9)
        assert x.error == y.error


def test_fast_engine_rejects_max_norm(blobs):
    params = init_weights([2, 4, 3])
    with pytest.raises(ValueError):
        train_epoch(params, params.zeros_like(), MeanBank.for_sizes(params.sizes), blobs,
                    RegularizerConfig(), OptimizerConfig(), max_norm=1.0, engine="fast")


@pytest.mark.parametrize("engine", ["fast", "reference"])
def test_training_is_deterministic(blobs, engine):
    a = run(blobs, GRDI, 0.5, epochs=2, engine=engine)
    b = run(blobs, GRDI, 0.5, epochs=2, engine=engine)
    assert same(a[0], b[0]) and same(a[1], b[1])


def test_blob_task_umax_learns():
    data = synth_blobs(3, 100, 2, 0.5, seed=0)
    assert nearest_centroid_error(data) < 0.05
    params, *_ = run(data, UMAX, 0.0, epochs=20)
    _, error, _ = evaluate(params, data)
    assert error < 0.05


def test_grdi_flattens_outputs(blobs):
    ents = []
    for mode, beta in [(UMAX, 0.0), (GRDI, 0.2), (GRDI, 0.8)]:
        params, *_ = run(blobs, mode, beta, epochs=5)
        ents.append(output_entropy(forward_batch(params, blobs.images)))
    assert ents[0] < ents[1] < ents[2]


@pytest.mark.parametrize("engine", ["fast", "reference"])
def test_divergence_reports_example(blobs, engine):
    with pytest.raises(DivergenceError) as info:
        run(blobs, UMAX, 0.0, epochs=1, engine=engine, alpha=1e305)
    assert info.value.index is None or 0 <= info.value.index < len(blobs)


def test_evaluate_ties_resolve_to_lowest_index(blobs):
    utility, error, f = evaluate(zero_params([2, 4, 3]), blobs)
    assert utility == pytest.approx(np.log(1 / 3))
    assert error == pytest.approx(np.mean(blobs.labels != 0))


def test_train_epoch_rejects_wrong_input_size(blobs):
    params = init_weights([3, 4, 3])
    with pytest.raises(ShapeError):
        train_epoch(params, params.zeros_like(), MeanBank.for_sizes(params.sizes), blobs,
                    RegularizerConfig(), OptimizerConfig())


@needs_mnist
@pytest.mark.mnist
def test_gradients_match_fd_during_mnist_training(mnist):
    """Spot-check analytic gradients at 10 random steps of a real (small) MNIST run."""
    train, _ = mnist
    rng = np.random.default_rng(0)
    params = init_weights([784, 12, 10], seed=0)
    velocity = params.zeros_like()
    bank = MeanBank.for_sizes(params.sizes, tau=100)
    opt = OptimizerConfig(alpha=0.01, gamma=0.9)
    reg = RegularizerConfig(GRDI, 0.2, tau=100)
    checks = set(rng.choice(300, size=10, replace=False))
    theta_size = params.flat().size
    for step, k in enumerate(rng.permutation(len(train))[:300]):
        x, label = train.images[k], int(train.labels[k])
        t = forward(params, x)
        if not bank.warm:
            bank.warm_up(t)
        if step in checks:
            coords = rng.choice(theta_size, size=40, replace=False)
            # parameters touching the active inputs, so the check is not vacuous
            active = np.flatnonzero(x > 0)[:10]
            coords = np.concatenate([coords, active])
            g = backprop(params, t, grdi_output_delta(t, label, reg.beta, bank)).flat()
            fd = fd_gradient(grdi_objective(x[None], np.array([label]), reg.beta, bank.output.copy()),
                             params, h=1e-5, coords=coords)
            assert rel_err(g[coords], fd[coords]) < 1e-4
            u = backprop(params, t, utility_derivative(t, label)).flat()
            fd = fd_gradient(lambda p: utility_cross_entropy(forward(p, x), label), params, h=1e-5, coords=coords)
            assert rel_err(u[coords], fd[coords]) < 1e-5
        sgd_momentum_step(params, velocity, mode_gradient(params, t, label, reg, bank), opt)
        bank.update(t)
