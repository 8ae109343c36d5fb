"""Shared oracles for the test-suite."""

import numpy as np

FD_STEP = 1e-4
FD_RTOL = 1e-3
# denominator floor: gradients below this magnitude are compared absolutely
FD_FLOOR = 1e-6


def numerical_grad(loss_fn, array, step=FD_STEP):
    """Central finite differences of scalar ``loss_fn()`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn())
        flat[i] = orig - step
        down = float(loss_fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
    return np.abs(analytic - numeric) / denom


def assert_grad_close(analytic, numeric, rtol=FD_RTOL, label=""):
    err = rel_error(analytic, numeric)
    worst = float(err.max()) if err.size else 0.0
    assert worst < rtol, f"{label}: max relative gradient error {worst:.3e} >= {rtol}"
    return worst


def symbolic_param_count(cfg):
    """Closed-form parameter count, written independently of the implementation."""
    bn = lambda c: 2 * c
    r = cfg.se_reduction

    def block(cin, c):
        n = c * cin + bn(c) + 3 * c + c * c + bn(c)
        n += (c * (c // r) + c // r) + ((c // r) * c + c)
        if cin != c:
            n += c * cin + bn(c)
        return n

    c0 = cfg.stage_channels[0]
    total = 3 * cfg.in_channels * c0 + bn(c0)
    cin = c0
    for nb, c in zip(cfg.stage_blocks, cfg.stage_channels):
        for _ in range(nb):
            total += block(cin, c)
            cin = c
    cp = cfg.stage_channels[-1] if cfg.ablate_mfa else sum(cfg.stage_channels)
    a = cfg.asp_bottleneck
    total += bn(cp) + (a * cp + a) + (a + 1) + (cfg.embedding_dim * 2 * cp + cfg.embedding_dim)
    return total
