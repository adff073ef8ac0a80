"""Quick oracle suite run by ``perturbnet check``.

Each check returns ``(name, passed, detail)``; sizes are chosen so the whole
suite finishes in well under a minute.
"""

from __future__ import annotations

import numpy as np

from . import learners, oracle
from .data import one_hot
from .learners import UpdateSet
from .network import NetworkSpec, NoiseTarget, forward, init_network, sample_noise
from .numerics import INIT, INPUTS, NOISE, ORACLE, RngStream, angle_degrees


def _net(widths, seed, **kw):
    return init_network(NetworkSpec(widths, **kw), RngStream(seed).derive(INIT))


def _target(classes, seed):
    return one_hot(np.array([seed % classes]), classes)[0]


def check_bp_vs_fd(seed=0):
    net = _net((12, 8, 8, 5), seed)
    x = oracle.smooth_input(net, RngStream(seed).derive(INPUTS))
    t = _target(5, seed)
    bp = learners.bp_update(net, forward(net, x), t, "cce")
    fd = oracle.fd_gradient(net, x, t, "cce", 1e-5)
    ang = angle_degrees(bp, fd)
    err = oracle.relative_error(fd, bp)
    return "bp-vs-finite-differences", ang < 0.01 and err < 1e-6, f"angle={ang:.2e} deg, rel.err={err:.2e}"


def check_covariance(seed=0):
    W = RngStream(seed).derive(ORACLE, 1).generator().standard_normal((8, 8))
    _, err = oracle.covariance_propagation_check(W, 100_000, RngStream(seed).derive(ORACLE, 2))
    return "covariance-propagation", err < 0.05, f"rel.err={err:.4f}"


def check_directional_recovery(seed=0):
    net = _net((16, 8, 8, 4), seed)
    x = oracle.smooth_input(net, RngStream(seed).derive(INPUTS))
    t = _target(4, seed)
    angles = [oracle.median_directional_angles(net, x, t, l, seed=seed) for l in range(1, net.depth + 1)]
    ok = all(r[0] > r[1] > r[2] for r in angles)
    return "directional-gradient-recovery", ok, "angles " + "; ".join(
        ",".join(f"{a:.1f}" for a in r) for r in angles)


def check_anp_soundness(seed=0, draws=10_000):
    net = _net((16, 8, 4), seed)
    x = RngStream(seed).derive(INPUTS).generator().standard_normal((1, 16))
    t = _target(4, seed)
    clean = forward(net, x)
    bp = learners.bp_update(net, clean, t, "cce")
    xs = np.repeat(x, draws, axis=0)
    noisy = forward(net, xs, sample_noise(net, NoiseTarget.all_layers(), 1e-6,
                                          RngStream(seed).derive(NOISE), batch=draws))
    clean_b = forward(net, xs)
    dL = learners.loss_differential("cce", noisy, clean_b, t)
    mean = learners.anp_update(clean_b, noisy, dL)
    ang = angle_degrees(mean, bp)
    return "anp-expected-direction", ang < 90.0, f"angle={ang:.2f} deg"


def check_layer1_identity(seed=0):
    net = _net((16, 8, 8, 4), seed)
    x = RngStream(seed).derive(INPUTS).generator().standard_normal((1, 16))
    t = _target(4, seed)
    clean = forward(net, x)
    noisy = forward(net, x, sample_noise(net, NoiseTarget.all_layers(), 1e-6, RngStream(seed)))
    dL = learners.loss_differential("cce", noisy, clean, t)
    a = learners.np_update(clean, noisy, dL)
    b = learners.anp_update(clean, noisy, dL)
    ang = angle_degrees(a.layers[0], b.layers[0])
    return "np-anp-layer1-identity", ang < 1e-6, f"angle={ang:.2e} deg"


def check_single_layer_equivalence(seed=0):
    net = _net((6, 3), seed)
    x = RngStream(seed).derive(INPUTS).generator().standard_normal((4, 6))
    t = one_hot(np.arange(4) % 3, 3)
    clean = forward(net, x)
    noisy = forward(net, x, sample_noise(net, NoiseTarget.single_layer(1), 1e-6, RngStream(seed), 4))
    dL = learners.loss_differential("cce", noisy, clean, t)
    inp = UpdateSet((learners.inp_layer_update(clean, noisy, dL, 1),))
    anp = learners.anp_update(clean, noisy, dL)
    same = all(np.array_equal(p, q) for p, q in zip(inp.layers, anp.layers))
    return "single-layer-inp-equals-anp", same, "bitwise equal" if same else "differ"


CHECKS = (check_bp_vs_fd, check_covariance, check_directional_recovery, check_anp_soundness,
          check_layer1_identity, check_single_layer_equivalence)


def run_checks():
    return [check() for check in CHECKS]
