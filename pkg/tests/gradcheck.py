"""Central finite-difference gradient checking in float64."""

import numpy as np


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check(loss, params, grads, points=20, seed=0, h=1e-6, tol=1e-4, max_tries=400):
    """Compare ``grads`` with central differences of ``loss()``.

    ``params``/``grads`` map names to arrays; ``loss`` reads the live arrays.
    Coordinates are drawn at random across all parameters. A coordinate whose
    finite difference changes between steps ``h`` and ``h/2`` straddles a
    kink (ReLU-like corner, clamp edge, pooling tie) and is redrawn.
    Returns ``(max_rel_error, checked, redrawn)``.
    """
    rng = np.random.default_rng(seed)
    names = [n for n in params if params[n].size]
    sizes = np.array([params[n].size for n in names], dtype=float)
    worst, checked, redrawn = 0.0, 0, 0
    for _ in range(max_tries):
        if checked >= points:
            break
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]

        def fd(step):
            p[idx] = old + step
            lp = loss()
            p[idx] = old - step
            lm = loss()
            p[idx] = old
            return (lp - lm) / (2 * step)

        d1, d2 = fd(h), fd(h / 2)
        if rel_error(d1, d2) > tol / 10:
            redrawn += 1
            continue
        worst = max(worst, rel_error(float(grads[name][idx]), d1))
        checked += 1
    return worst, checked, redrawn
