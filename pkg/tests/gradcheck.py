"""Central finite-difference gradient checking used across the test suite.

Convention: rel_err = |analytic - numeric| / max(1e-6, |analytic|, |numeric|),
h = 1e-5, everything in float64.
"""

import numpy as np

from mkpn.tensor import Tensor


def numeric_partial(build_loss, param: Tensor, idx, h=1e-5) -> float:
    """Central difference of the scalar loss w.r.t. one coordinate of param."""
    orig = param.data[idx]
    param.data[idx] = orig + h
    lp = build_loss().item()
    param.data[idx] = orig - h
    lm = build_loss().item()
    param.data[idx] = orig
    return (lp - lm) / (2.0 * h)


def check_grads(build_loss, params, rng=None, max_coords_per_param=None,
                h=1e-5, tol=1e-4):
    """Compare backward() grads of build_loss() against finite differences.

    Checks every coordinate of every param unless max_coords_per_param caps
    the count (uniform subsample without replacement).  Returns the number of
    coordinates checked; raises AssertionError with the worst offender.
    """
    for p in params:
        assert p.data.dtype == np.float64, "gradient checks require float64"
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    checked = 0
    worst = (0.0, None)
    for p, a in zip(params, analytic):
        flat_indices = np.arange(p.data.size)
        if max_coords_per_param is not None and p.data.size > max_coords_per_param:
            assert rng is not None
            flat_indices = rng.choice(p.data.size, size=max_coords_per_param, replace=False)
        for flat in flat_indices:
            idx = np.unravel_index(flat, p.data.shape)
            n = numeric_partial(build_loss, p, idx, h=h)
            av = a[idx]
            rel = abs(av - n) / max(1e-6, abs(av), abs(n))
            checked += 1
            if rel > worst[0]:
                worst = (rel, (p.shape, idx, av, n))
    assert worst[0] < tol, f"gradient mismatch {worst[0]:.3e} at {worst[1]}"
    return checked
