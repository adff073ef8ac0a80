import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perturbnet import learners
from perturbnet.data import one_hot
from perturbnet.learners import (AdamState, RuleConfig, UpdateSet, adam_step, anp_from_differences,
                                 anp_update, bp_update, decorrelation_step, double_noisy_differences,
                                 forward_passes_per_sample, inp_layer_update, inp_update,
                                 loss_differential, np_from_noise, np_update, resample_update,
                                 rule_update)
from perturbnet.network import (Network, NetworkSpec, NoiseBundle, NoiseTarget, forward,
                                init_network, sample_noise)
from perturbnet.numerics import (DegenerateInputError, InvalidParameterError, RngStream,
                                 angle_degrees)
from perturbnet.oracle import fd_gradient, relative_error, smooth_input


def scalar_mse_net():
    return Network(NetworkSpec((1, 1), linear_output=False), [np.array([[1.0]])])


def random_net(widths, seed=0, **kw):
    return init_network(NetworkSpec(widths, **kw), RngStream(seed))


def traces(net, x, variance=1e-6, seed=1, target=NoiseTarget.all_layers()):
    x = np.atleast_2d(x)
    clean = forward(net, x)
    noisy = forward(net, x, sample_noise(net, target, variance, RngStream(seed), batch=len(x)))
    return clean, noisy


# --- backprop -------------------------------------------------------------

def test_bp_zero_at_mse_optimum():
    net = random_net((4, 3, 2), linear_output=False)
    x = np.ones((1, 4))
    clean = forward(net, x)
    u = bp_update(net, clean, clean.output[0], "mse")
    assert all(not w.any() for w in u.layers)


def test_bp_scalar_hand_gradient():
    net = scalar_mse_net()
    u = bp_update(net, forward(net, np.array([1.0])), np.array([0.0]), "mse")
    np.testing.assert_allclose(u.layers[0], [[2.0]])


def test_bp_rejects_noisy_trace():
    net = random_net((3, 2))
    _, noisy = traces(net, np.ones(3))
    with pytest.raises(InvalidParameterError):
        bp_update(net, noisy, np.eye(2)[0])


@pytest.mark.parametrize("loss,decorrelate", [("cce", False), ("mse", False), ("cce", True)])
def test_bp_matches_finite_differences(loss, decorrelate):
    spec = NetworkSpec((7, 6, 5, 4), decorrelate=decorrelate, linear_output=(loss == "cce"))
    net = init_network(spec, RngStream(3))
    if decorrelate:
        rng = RngStream(4).generator()
        net.decorrelators = [np.eye(n) + 0.1 * rng.standard_normal((n, n)) for n in (7, 6, 5)]
    x = smooth_input(net, RngStream(5), batch=3)
    t = one_hot(np.array([0, 1, 3]), 4) if loss == "cce" else RngStream(6).generator().random((3, 4))
    bp = bp_update(net, forward(net, x), t, loss)
    fd = fd_gradient(net, x, t, loss, 1e-5)
    assert angle_degrees(bp, fd) < 0.01
    assert relative_error(fd, bp) < 1e-6


# --- NP -------------------------------------------------------------------

def test_np_zero_loss_change():
    net = random_net((3, 4, 2))
    clean, noisy = traces(net, np.ones(3))
    u = np_update(clean, noisy, np.zeros(1))
    assert all(not w.any() for w in u.layers)


def test_np_hand_example():
    u = np_from_noise([np.array([[1e-3]])], np.array([2.0]), [np.array([[1.0, -1.0]])], 1e-6)
    np.testing.assert_allclose(u.layers[0], [[2000.0, -2000.0]])


def test_np_requires_all_layer_bundle():
    net = random_net((3, 4, 2))
    clean, noisy = traces(net, np.ones(3), target=NoiseTarget.single_layer(1))
    with pytest.raises(InvalidParameterError):
        np_update(clean, noisy, np.zeros(1))


def test_np_monte_carlo_mean_matches_bp():
    net = scalar_mse_net()
    n = 10_000
    x = np.ones((n, 1))
    clean, noisy = traces(net, x, variance=1e-6, seed=11)
    dL = loss_differential("mse", noisy, clean, np.zeros(1))
    u = np_update(clean, noisy, dL)
    assert u.layers[0][0, 0] == pytest.approx(2.0, rel=0.05)


# --- INP ------------------------------------------------------------------

def test_inp_scalar_hand_expansion():
    net = scalar_mse_net()
    stream = RngStream(2)
    u = inp_update(net, np.array([1.0]), np.array([0.0]), 1e-6, stream, loss="mse")
    v = sample_noise(net, NoiseTarget.single_layer(1), 1e-6, stream.derive(1)).vectors[0][0, 0]
    assert u.layers[0][0, 0] == pytest.approx(2.0 + v, rel=1e-8)


def test_inp_zero_loss_change():
    net = random_net((3, 4, 2))
    clean, noisy = traces(net, np.ones(3), target=NoiseTarget.single_layer(1))
    assert not inp_layer_update(clean, noisy, np.zeros(1), 1).any()


def test_inp_uses_one_pass_per_layer():
    net = random_net((5, 4, 4, 3))
    rule = RuleConfig(kind="inp")
    assert forward_passes_per_sample(rule, net.depth) == 1 + net.depth


# --- ANP ------------------------------------------------------------------

def test_anp_zero_loss_change():
    da = [np.ones((1, 3)), np.ones((1, 2))]
    u = anp_from_differences(da, np.zeros(1), [np.ones((1, 4)), np.ones((1, 3))], 5)
    assert all(not w.any() for w in u.layers)


def test_anp_degenerate_difference():
    net = random_net((3, 2))
    clean = forward(net, np.ones(3))
    with pytest.raises(DegenerateInputError):
        anp_update(clean, clean, np.ones(1))


def test_anp_skips_degenerate_rows_only():
    inputs = [np.ones((2, 2))]
    da = [np.array([[0.0, 0.0], [1.0, 0.0]])]
    u = anp_from_differences(da, np.array([5.0, 1.0]), inputs, 2)
    # row 0 is skipped; row 1 contributes 2 * 1 * [1, 0] / 1, averaged over 2 rows
    np.testing.assert_allclose(u.layers[0], [[1.0, 1.0], [0.0, 0.0]])


def test_anp_never_reads_noise():
    net = random_net((4, 5, 3))
    clean, noisy = traces(net, np.ones(4))
    stripped = type(noisy)(noisy.x0, noisy.inputs, noisy.pre, noisy.post, None)
    dL = np.array([0.3])
    a, b = anp_update(clean, noisy, dL), anp_update(clean, stripped, dL)
    assert all(np.array_equal(p, q) for p, q in zip(a.layers, b.layers))


def test_single_layer_inp_equals_anp_bitwise():
    net = random_net((6, 3))
    x = RngStream(7).generator().standard_normal((4, 6))
    clean, noisy = traces(net, x, target=NoiseTarget.single_layer(1))
    t = one_hot(np.arange(4) % 3, 3)
    dL = loss_differential("cce", noisy, clean, t)
    assert np.array_equal(inp_layer_update(clean, noisy, dL, 1), anp_update(clean, noisy, dL).layers[0])


def test_single_layer_anp_parallel_to_np():
    net = random_net((6, 3))
    clean, noisy = traces(net, np.ones(6))
    dL = loss_differential("cce", noisy, clean, np.eye(3)[1])
    assert angle_degrees(np_update(clean, noisy, dL), anp_update(clean, noisy, dL)) < 1e-6


def test_layer_one_np_anp_identical_direction():
    net = random_net((8, 6, 6, 4))
    clean, noisy = traces(net, RngStream(2).generator().standard_normal(8))
    dL = loss_differential("cce", noisy, clean, np.eye(4)[0])
    a, b = np_update(clean, noisy, dL), anp_update(clean, noisy, dL)
    assert angle_degrees(a.layers[0], b.layers[0]) < 1e-6
    ratio = b.layers[0] / a.layers[0]
    np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-6)
    assert ratio.flat[0] > 0


def test_unit_count_modes():
    assert learners.unit_count((3, 4, 2)) == 6
    assert learners.unit_count((3, 4, 2), "all-units") == 9
    with pytest.raises(InvalidParameterError):
        learners.unit_count((3, 4, 2), "bogus")


def test_anp_expected_direction_is_descent():
    net = random_net((16, 8, 4), seed=1)
    x = RngStream(3).generator().standard_normal((1, 16))
    t = np.eye(4)[2]
    bp = bp_update(net, forward(net, x), t)
    xs = np.repeat(x, 10_000, axis=0)
    clean, noisy = traces(net, xs, seed=5)
    dL = loss_differential("cce", noisy, clean, t)
    assert angle_degrees(anp_update(clean, noisy, dL), bp) < 90.0


# --- shared properties ----------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_rules_positively_homogeneous_in_loss_change(c, seed):
    net = random_net((5, 4, 3), seed=seed % 7)
    x = RngStream(seed).generator().standard_normal((3, 5))
    clean, noisy = traces(net, x, seed=seed)
    dL = loss_differential("cce", noisy, clean, one_hot(np.array([0, 1, 2]), 3))
    for rule in (np_update, anp_update):
        base, scaled = rule(clean, noisy, dL), rule(clean, noisy, c * dL)
        for p, q in zip(base.layers, scaled.layers):
            np.testing.assert_allclose(q, c * p, rtol=1e-10, atol=1e-300)


def test_batch_update_is_mean_of_sample_updates_and_order_free():
    net = random_net((5, 4, 3))
    x = RngStream(1).generator().standard_normal((6, 5))
    t = one_hot(np.arange(6) % 3, 3)
    clean, noisy = traces(net, x)
    dL = loss_differential("cce", noisy, clean, t)
    for rule in (np_update, anp_update):
        batch = rule(clean, noisy, dL)
        singles = []
        for i in range(6):
            c1, n1 = forward(net, x[i]), forward(net, x[i], NoiseBundle(
                tuple(v[i:i + 1] for v in noisy.noise.vectors), noisy.noise.target, 1e-6))
            singles.append(rule(c1, n1, loss_differential("cce", n1, c1, t[i])))
        for p, q in zip(batch.layers, UpdateSet.mean(singles).layers):
            np.testing.assert_allclose(p, q, rtol=1e-10)
        perm = np.array([3, 0, 5, 1, 4, 2])
        c2 = forward(net, x[perm])
        n2 = forward(net, x[perm], NoiseBundle(tuple(v[perm] for v in noisy.noise.vectors),
                                               noisy.noise.target, 1e-6))
        shuffled = rule(c2, n2, dL[perm])
        for p, q in zip(batch.layers, shuffled.layers):
            np.testing.assert_allclose(p, q, rtol=1e-10)


# --- double-noisy mode ----------------------------------------------------

def test_double_noisy_identical_bundles_rejected():
    net = random_net((3, 4, 2))
    b = sample_noise(net, NoiseTarget.all_layers(), 1e-6, RngStream(0))
    p = forward(net, np.ones(3), b)
    with pytest.raises(DegenerateInputError):
        double_noisy_differences(p, p, "cce", np.eye(2)[0])


def test_double_noisy_swap_negates():
    net = random_net((3, 4, 2))
    b1 = sample_noise(net, NoiseTarget.all_layers(), 1e-6, RngStream(0))
    b2 = sample_noise(net, NoiseTarget.all_layers(), 1e-6, RngStream(1))
    p1, p2 = forward(net, np.ones(3), b1), forward(net, np.ones(3), b2)
    t = np.eye(2)[0]
    da, dL = double_noisy_differences(p1, p2, "cce", t)
    db, dM = double_noisy_differences(p2, p1, "cce", t)
    np.testing.assert_array_equal(dL, -dM)
    for a, b in zip(da, db):
        np.testing.assert_array_equal(a, -b)
    # with a common input factor the ANP direction is unchanged by the swap
    u = anp_from_differences(da, dL, p2.inputs, 6)
    w = anp_from_differences(db, dM, p2.inputs, 6)
    for a, b in zip(u.layers, w.layers):
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_double_noisy_only_for_np_and_anp():
    with pytest.raises(InvalidParameterError):
        RuleConfig(kind="bp", double_noisy=True)
    with pytest.raises(InvalidParameterError):
        RuleConfig(kind="inp", double_noisy=True)
    RuleConfig(kind="anp", double_noisy=True)


# --- resampling -----------------------------------------------------------

def test_resample_single_and_zero():
    u = UpdateSet((np.arange(4.0).reshape(2, 2),))
    assert np.array_equal(resample_update(lambda k: u, 1).layers[0], u.layers[0])
    z = UpdateSet((np.zeros((2, 2)),))
    assert not resample_update(lambda k: z, 7).layers[0].any()
    with pytest.raises(InvalidParameterError):
        resample_update(lambda k: u, 0)


def test_resampling_improves_alignment():
    net = random_net((16, 12, 12, 4), seed=2)
    x = RngStream(8).generator().standard_normal((1, 16))
    t = np.eye(4)[1]
    bp = bp_update(net, forward(net, x), t)
    angles = {1: [], 100: []}
    for trial in range(20):
        for K in angles:
            rule = RuleConfig(kind="anp", resamples=K)
            u = rule_update(net, rule, x, t, "cce", RngStream(trial).derive(K)).update
            angles[K].append(angle_degrees(u, bp))
    assert np.mean(angles[100]) <= np.mean(angles[1])


# --- decorrelation --------------------------------------------------------

def test_decorrelation_examples():
    np.testing.assert_array_equal(decorrelation_step(np.eye(2), np.array([1.0, 0.0]), 0.1), np.eye(2))
    np.testing.assert_allclose(decorrelation_step(np.eye(2), np.array([1.0, 1.0]), 0.1),
                               [[1.0, -0.1], [-0.1, 1.0]])
    with pytest.raises(InvalidParameterError):
        decorrelation_step(np.eye(3), np.ones(2), 0.1)


def offdiag_msq(x):
    c = np.cov(x, rowvar=False)
    return float((c[~np.eye(len(c), dtype=bool)] ** 2).mean())


def test_decorrelation_reduces_covariance():
    rng = RngStream(5).generator()
    mix = np.eye(6) + 0.5 * rng.standard_normal((6, 6))
    x = rng.standard_normal((500, 6)) @ mix.T
    R = np.eye(6)
    before = offdiag_msq(x @ R.T)
    drops = 0
    for _ in range(100):
        R = decorrelation_step(R, x @ R.T, 1e-3)
        now = offdiag_msq(x @ R.T)
        drops += now < before
        before = now
    assert drops >= 90


# --- Adam -----------------------------------------------------------------

def test_adam_zero_update():
    net = random_net((3, 2))
    w0 = net.weights[0].copy()
    state = AdamState.for_network(net)
    adam_step(state, UpdateSet.zeros_like(net), 1e-3, net)
    assert state.t == 1
    assert np.array_equal(net.weights[0], w0)


@pytest.mark.parametrize("g", [4.0, -4.0])
def test_adam_first_step(g):
    net = Network(NetworkSpec((1, 1)), [np.array([[0.5]])])
    adam_step(AdamState.for_network(net), UpdateSet((np.array([[g]]),)), 1e-3, net)
    assert net.weights[0][0, 0] - 0.5 == pytest.approx(-1e-3 * np.sign(g), rel=1e-6)


def test_adam_deterministic():
    a, b = random_net((4, 3), seed=1), random_net((4, 3), seed=1)
    sa, sb = AdamState.for_network(a), AdamState.for_network(b)
    rng = RngStream(9).generator()
    for _ in range(5):
        u = UpdateSet((rng.standard_normal((3, 4)),))
        adam_step(sa, u, 1e-2, a)
        adam_step(sb, u, 1e-2, b)
    assert np.array_equal(a.weights[0], b.weights[0])
    assert np.all(sa.v[0] >= 0)


# --- configuration and dispatch -------------------------------------------

def test_rule_config_validation():
    with pytest.raises(InvalidParameterError):
        RuleConfig(variance=0.0)
    with pytest.raises(InvalidParameterError):
        RuleConfig(resamples=0)
    with pytest.raises(ValueError):
        RuleConfig(kind="sgd")
    assert RuleConfig(kind="anp", decorrelate=True).label == "DANP"


@pytest.mark.parametrize("kind,double,K,expected", [
    ("bp", False, 1, 1), ("np", False, 1, 2), ("anp", False, 3, 4),
    ("np", True, 1, 2), ("anp", True, 5, 10), ("inp", False, 1, 4), ("inp", False, 2, 7)])
def test_forward_pass_accounting(kind, double, K, expected):
    rule = RuleConfig(kind=kind, resamples=K, double_noisy=double)
    assert forward_passes_per_sample(rule, 3) == expected


def test_rule_update_bp_matches_direct():
    net = random_net((5, 4, 3))
    x = RngStream(0).generator().standard_normal((4, 5))
    t = one_hot(np.arange(4) % 3, 3)
    step = rule_update(net, RuleConfig(kind="bp"), x, t, "cce", RngStream(0))
    direct = bp_update(net, forward(net, x), t)
    assert all(np.array_equal(p, q) for p, q in zip(step.update.layers, direct.layers))
    assert step.forward_passes == 4


def test_rule_update_double_noisy_reference_is_noisy():
    net = random_net((5, 4, 3))
    x = RngStream(0).generator().standard_normal((2, 5))
    t = one_hot(np.array([0, 1]), 3)
    step = rule_update(net, RuleConfig(kind="anp", double_noisy=True), x, t, "cce", RngStream(1))
    assert step.reference.noise is not None
    assert step.update.is_finite()
    assert step.forward_passes == 4


def test_rule_update_deterministic():
    net = random_net((5, 4, 3))
    x = RngStream(0).generator().standard_normal((2, 5))
    t = one_hot(np.array([0, 1]), 3)
    for kind in ("np", "anp", "inp"):
        rule = RuleConfig(kind=kind, resamples=2)
        a = rule_update(net, rule, x, t, "cce", RngStream(4)).update
        b = rule_update(net, rule, x, t, "cce", RngStream(4)).update
        assert all(np.array_equal(p, q) for p, q in zip(a.layers, b.layers))


def test_decorrelate_network_updates_every_R():
    net = random_net((4, 3, 2), decorrelate=True)
    x = RngStream(0).generator().standard_normal((10, 4))
    learners.decorrelate_network(net, forward(net, x), 1e-2)
    assert all(not np.array_equal(R, np.eye(len(R))) for R in net.decorrelators)


def test_anp_mean_follows_propagated_gradient():
    # To first order dL = sum_l g_l . eps_l and da_l = eps_l + (upstream noise carried forward),
    # so E[dL da_l] is proportional to h_l = g_l + W_l D_{l-1} h_{l-1}, not to g_l.
    # That accumulated term is a bias averaging cannot remove; NP has no such term.
    net = random_net((16, 12, 12, 4), seed=1)
    x = smooth_input(net, RngStream(2))
    t = np.eye(4)[0]
    clean = forward(net, x)
    g = [gl[0] for gl in learners.backprop(net, clean, t, "cce")]
    h = [g[0]]
    for l in range(2, net.depth + 1):
        h.append(g[l - 1] + net.weights[l - 1] @ (net.activation_grad(clean.pre[l - 2], l - 1)[0] * h[-1]))
    n = 100_000
    xs = np.repeat(x, n, axis=0)
    cb, nb = traces(net, xs, seed=3)
    u = anp_update(cb, nb, loss_differential("cce", nb, cb, t))
    for l in (2, 3):
        xin = clean.inputs[l - 1][0]
        signal = u.layers[l - 1] @ xin / (xin @ xin)
        assert angle_degrees(signal, h[l - 1]) < 5.0
        assert angle_degrees(signal, g[l - 1]) > 10.0
