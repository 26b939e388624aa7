"""Independent reference implementations used by the tests."""

import math

import numpy as np


def leaf_objective(w, G, H, l1, l2):
    return G * w + 0.5 * (H + l2) * w * w + l1 * abs(w)


def grid_leaf_weight(G, H, l1, l2, step=1e-4):
    # coarse scan to bracket the minimum, then a fine grid around it
    span = (abs(G) + 1.0) / (H + l2)
    coarse = np.linspace(-span, span, 20001)
    vals = G * coarse + 0.5 * (H + l2) * coarse ** 2 + l1 * np.abs(coarse)
    c = coarse[int(np.argmin(vals))]
    fine = np.arange(c - 2 * (coarse[1] - coarse[0]), c + 2 * (coarse[1] - coarse[0]) + step, step)
    fine = np.append(fine, 0.0)
    vals = G * fine + 0.5 * (H + l2) * fine ** 2 + l1 * np.abs(fine)
    return float(fine[int(np.argmin(vals))])


def node_score(G, H, l1, l2):
    """Negated optimal leaf objective, derived by case analysis on sign(w)."""
    if G > l1:
        w = -(G - l1) / (H + l2)
    elif G < -l1:
        w = -(G + l1) / (H + l2)
    else:
        w = 0.0
    return -leaf_objective(w, G, H, l1, l2)


def brute_force_split(X, g, h, l1, l2, min_leaf=1):
    """Every (feature, midpoint) candidate scored from explicit sums.

    Returns the best ``(gain, feature, threshold)`` with ties resolved to the
    lowest feature then the lowest threshold, or None when nothing has positive
    gain.
    """
    n, D = X.shape
    Gp, Hp = float(np.sum(g)), float(np.sum(h))
    parent = node_score(Gp, Hp, l1, l2)
    cands = []
    for f in range(D):
        vals = sorted(set(X[:, f].tolist()))
        for a, b in zip(vals[:-1], vals[1:]):
            t = a + (b - a) / 2.0
            if not t < b:
                t = a
            left = X[:, f] <= t
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            gain = node_score(float(np.sum(g[left])), float(np.sum(h[left])), l1, l2) \
                + node_score(float(np.sum(g[~left])), float(np.sum(h[~left])), l1, l2) - parent
            cands.append((gain, f, t))
    if not cands:
        return None
    best = max(c[0] for c in cands)
    if not best > 0:
        return None
    tol = 1e-9 * max(1.0, abs(best))
    return min((c for c in cands if c[0] >= best - tol), key=lambda c: (c[1], c[2]))


def rmse(pred, truth):
    s = 0.0
    for p, t in zip(pred, truth):
        s += (p - t) ** 2
    return math.sqrt(s / len(pred))


def r2(pred, truth):
    m = math.fsum(truth) / len(truth)
    sse = math.fsum((t - p) ** 2 for p, t in zip(pred, truth))
    sst = math.fsum((t - m) ** 2 for t in truth)
    return 1.0 - sse / sst


def attention_2step_d1(x, wq, bq, wk, bk, wv, bv, wo, bo):
    """Single-head, width-1 self-attention over two steps in plain scalars."""
    q = [wq * xi + bq for xi in x]
    k = [wk * xi + bk for xi in x]
    v = [wv * xi + bv for xi in x]
    out = []
    for i in range(2):
        s = [q[i] * k[j] for j in range(2)]
        m = max(s)
        e = [math.exp(sj - m) for sj in s]
        w = [ej / sum(e) for ej in e]
        out.append(wo * (w[0] * v[0] + w[1] * v[1]) + bo)
    return out


def visionary_grad_errors(seed, batch=3):
    """grad_check error of the training loss w.r.t. each parameter group of a tiny encoder."""
    from bttf import numcore as nc
    from bttf.visionary import VisionaryConfig, forward, init_params, loss_fn

    cfg = VisionaryConfig(k=3, h=1, d_model=4, n_heads=1, n_layers=1, d_ff=4, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, 3, 2))
    y = rng.normal(size=(batch, 1))
    params = init_params(cfg, 2)
    for name in params:  # break the zero-bias / unit-gain symmetry of a fresh init
        params[name] = params[name] + rng.normal(0.0, 0.3, size=params[name].shape)
    errors = {}
    for name in params:
        def f(t, name=name):
            p = dict(params)
            p[name] = t
            return loss_fn(forward(p, cfg, x), nc.Tensor(y))
        errors[name] = nc.grad_check(f, params[name])
    return errors
