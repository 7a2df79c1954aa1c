"""Brute-force reference implementations used by the unit and acceptance tests."""

import contextlib
import itertools
import math

import numpy as np

from deepcontext import nn
from deepcontext.nn import roi_bins


def conv3d_loops(x, w, b, stride=1, padding=0):
    C, D, H, W = x.shape
    K, _, kd, kh, kw = w.shape
    xp = np.zeros((C, D + 2 * padding, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + D, padding:padding + H, padding:padding + W] = x
    Do = (D + 2 * padding - kd) // stride + 1
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((K, Do, Ho, Wo))
    for k in range(K):
        for i in range(Do):
            for j in range(Ho):
                for l in range(Wo):
                    acc = b[k]
                    for c in range(C):
                        for a in range(kd):
                            for bb in range(kh):
                                for cc in range(kw):
                                    acc += w[k, c, a, bb, cc] * xp[c, i * stride + a, j * stride + bb, l * stride + cc]
                    out[k, i, j, l] = acc
    return out


def maxpool3d_loops(x, window, stride):
    C, D, H, W = x.shape
    Do, Ho, Wo = (D - window) // stride + 1, (H - window) // stride + 1, (W - window) // stride + 1
    out = np.zeros((C, Do, Ho, Wo))
    for c in range(C):
        for i in range(Do):
            for j in range(Ho):
                for l in range(Wo):
                    out[c, i, j, l] = x[c, i * stride:i * stride + window, j * stride:j * stride + window,
                                        l * stride:l * stride + window].max()
    return out


def roi_maxpool3d_loops(x, roi, out=6):
    C, D, H, W = x.shape
    lo, hi = roi
    edges = [roi_bins(lo[i], hi[i], n, out) for i, n in enumerate((D, H, W))]
    res = np.zeros((C, out, out, out))
    for c in range(C):
        for i, (d0, d1) in enumerate(edges[0]):
            for j, (h0, h1) in enumerate(edges[1]):
                for k, (w0, w1) in enumerate(edges[2]):
                    best = None
                    for d in range(d0, d1):
                        for h in range(h0, h1):
                            for w in range(w0, w1):
                                v = x[c, d, h, w]
                                if best is None or v > best:
                                    best = v
                    res[c, i, j, k] = 0.0 if best is None else best
    return res


def dense_loops(x, w, b):
    out = np.zeros(w.shape[0])
    for i in range(w.shape[0]):
        acc = b[i]
        for j in range(w.shape[1]):
            acc += w[i, j] * x[j]
        out[i] = acc
    return out


def softmax_ce_reference(logits, label):
    """-log p[label] via math.fsum in extended-range arithmetic."""
    m = max(logits)
    s = math.fsum(math.exp(v - m) for v in logits)
    return math.log(s) - (logits[label] - m)


def nn_distance_loops(src, dst):
    out = []
    for p in src:
        best = math.inf
        for q in dst:
            dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
            best = min(best, math.sqrt(dx * dx + dy * dy + dz * dz))
        out.append(best)
    return out


def shape_distance_loops(P, V):
    return math.fsum(nn_distance_loops(P, V)) / len(P) + math.fsum(nn_distance_loops(V, P)) / len(V)


def exhaustive_assignment_total(cost: np.ndarray) -> float:
    """Minimum over all injective assignments, summed in ascending row order."""
    n, m = cost.shape
    best = math.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = 0.0
            for r, c in enumerate(perm):
                total += cost[r, c]
            best = min(best, total)
    else:
        for perm in itertools.permutations(range(n), m):
            pairs = sorted(zip(perm, range(m)))
            total = 0.0
            for r, c in pairs:
                total += cost[r, c]
            best = min(best, total)
    return best


def random_roi(rng, dims):
    lo = np.array([rng.uniform(-2, n - 1) for n in dims])
    hi = lo + rng.uniform(0.2, 8, 3)
    return lo, hi


@contextlib.contextmanager
def routing_recorder(log):
    """Record how every relu / max-pool routes gradient while active.

    Each call appends the input gradient under a fixed random probe, which
    identifies the relu mask or the chosen argmax of every window.
    """
    names = ("relu", "maxpool3d", "roi_maxpool3d")
    orig = {n: getattr(nn, n) for n in names}

    def wrap(name):
        f = orig[name]

        def g(x, *a, **k):
            xt = nn.Tensor(x.data.copy(), requires_grad=True)
            kk = {**k, "return_flag": False} if name == "roi_maxpool3d" else k
            y = f(xt, *a, **kk)
            y.backward(np.random.default_rng(len(log)).normal(size=y.shape))
            log.append(xt.grad.tobytes())
            return f(x, *a, **k)

        return g

    for n in names:
        setattr(nn, n, wrap(n))
    try:
        yield
    finally:
        for n in names:
            setattr(nn, n, orig[n])


def guarded_grad_check(fn, params, eps=1e-3):
    """Central differences only where fn is smooth on [p - eps, p + eps].

    A coordinate is kept when both perturbed evaluations route exactly as the
    unperturbed one does; otherwise a kink lies inside the step and the
    difference quotient is not a derivative estimate. Returns
    (worst relative error, coordinates checked, coordinates skipped).
    """
    base = []
    for p in params:
        p.grad = None
    with routing_recorder(base):
        out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def run():
        log = []
        with routing_recorder(log):
            v = float(fn().data)
        return v, log == base

    worst, used, skipped = 0.0, 0, 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            o = flat[i]
            flat[i] = o + eps
            fp, okp = run()
            flat[i] = o - eps
            fm, okm = run()
            flat[i] = o
            if not (okp and okm):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            an = float(a.reshape(-1)[i])
            d = max(abs(an), abs(num))
            if d > 1e-9:
                worst = max(worst, abs(an - num) / d)
            used += 1
    return worst, used, skipped
