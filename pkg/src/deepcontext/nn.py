"""A small reverse-mode autodiff engine over numpy arrays.

Only the layers the scene networks use are provided. Spatial layers accept
either a single example ``[C, D, H, W]`` or a batch ``[N, C, D, H, W]``.
Arrays keep the dtype they were created with: float32 for training,
float64 when checking against loop oracles.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t._accumulate(g)
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # convenience arithmetic used by losses and tests
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def item(self) -> float:
        return float(self.data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as5d(x: np.ndarray):
    if x.ndim == 4:
        return x[None], True
    if x.ndim != 5:
        raise ValueError(f"expected [C,D,H,W] or [N,C,D,H,W], got shape {x.shape}")
    return x, False


def _triple(v) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def _out_dim(n: int, k: int, s: int, p: int, what: str) -> int:
    span = n + 2 * p - k
    if span < 0 or span % s:
        raise ValueError(f"{what}: input {n}, kernel {k}, stride {s}, padding {p} gives a non-integral output size")
    return span // s + 1


# -- elementwise / structural ops --------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, parents=(a, b), backward=back)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, parents=(a,), backward=lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), parents=(a,), backward=lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), parents=(a,), backward=lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(a.data[idx], parents=(a,), backward=back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors),
                  backward=lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors), backward=back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0).astype(x.dtype), parents=(x,), backward=lambda g: (g * mask,))


# -- layers -------------------------------------------------------------------


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """3D cross-correlation with zero padding.

    Columns are gathered channels-last so that the gradient scatter in the
    backward pass writes contiguous channel runs.
    """
    xd, single = _as5d(x.data)
    N, C, D, H, W = xd.shape
    K, Cw, kd, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"conv3d: input has {C} channels, weights expect {Cw}")
    if b.shape != (K,):
        raise ValueError(f"conv3d: bias shape {b.shape} != ({K},)")
    s = int(stride)
    p = int(padding)
    if s < 1:
        raise ValueError("conv3d: stride must be >= 1")
    Do, Ho, Wo = (_out_dim(n, k, s, p, "conv3d") for n, k in zip((D, H, W), (kd, kh, kw)))
    xp = np.pad(xd.transpose(0, 2, 3, 4, 1), ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(N * Do * Ho * Wo, kd * kh * kw * C)
    wmat = w.data.transpose(0, 2, 3, 4, 1).reshape(K, -1)
    out = (cols @ wmat.T + b.data).reshape(N, Do, Ho, Wo, K).transpose(0, 4, 1, 2, 3)

    def back(g):
        g5 = g[None] if single else g
        g2 = np.ascontiguousarray(g5.transpose(0, 2, 3, 4, 1)).reshape(-1, K)
        dw = (g2.T @ cols).reshape(K, kd, kh, kw, C).transpose(0, 4, 1, 2, 3)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, Do, Ho, Wo, kd, kh, kw, C)
            dxp = np.zeros_like(xp)
            for a in range(kd):
                for bb in range(kh):
                    for c in range(kw):
                        dxp[:, a:a + s * Do:s, bb:bb + s * Ho:s, c:c + s * Wo:s] += dcols[:, :, :, :, a, bb, c]
            dx = dxp[:, p:p + D, p:p + H, p:p + W].transpose(0, 4, 1, 2, 3)
            if single:
                dx = dx[0]
        return dx, np.ascontiguousarray(dw), db

    return Tensor(out[0] if single else out, parents=(x, w, b), backward=back)


def maxpool3d(x: Tensor, window=2, stride=None) -> Tensor:
    """Windowed maximum; the gradient goes to the first argmax of each window."""
    xd, single = _as5d(x.data)
    N, C, D, H, W = xd.shape
    kd, kh, kw = _triple(window)
    sd, sh, sw = _triple(stride if stride is not None else window)
    Do = _out_dim(D, kd, sd, 0, "maxpool3d")
    Ho = _out_dim(H, kh, sh, 0, "maxpool3d")
    Wo = _out_dim(W, kw, sw, 0, "maxpool3d")
    offsets = [np.unravel_index(j, (kd, kh, kw)) for j in range(kd * kh * kw)]

    def view(arr, a, bb, c):
        return arr[:, :, a:a + sd * Do:sd, bb:bb + sh * Ho:sh, c:c + sw * Wo:sw]

    out = view(xd, *offsets[0]).copy()
    for o in offsets[1:]:
        np.maximum(out, view(xd, *o), out=out)

    def back(g):
        g5 = g[None] if single else g
        dx = np.zeros_like(xd)
        taken = np.zeros(out.shape, dtype=bool)
        for o in offsets:
            hit = (view(xd, *o) == out) & ~taken
            taken |= hit
            view(dx, *o)[...] += g5 * hit
        return (dx[0] if single else dx,)

    return Tensor(out[0] if single else out, parents=(x,), backward=back)


def roi_bins(lo: float, hi: float, n: int, out: int = 6):
    """Integer [start, end) bin edges of an ROI span along one axis, clipped to [0, n)."""
    start = int(np.floor(lo))
    length = max(int(np.ceil(hi)) - start, 1)
    edges = []
    for i in range(out):
        a = start + (i * length) // out
        b = start + -((-(i + 1) * length) // out)
        edges.append((min(max(a, 0), n), min(max(b, 0), n)))
    return edges


def roi_outside(roi, dims) -> bool:
    lo, hi = np.asarray(roi[0], float), np.asarray(roi[1], float)
    start = np.floor(lo)
    end = np.maximum(np.ceil(hi), start + 1)
    return bool(np.any(end <= 0) or np.any(start >= np.asarray(dims)))


@lru_cache(maxsize=4096)
def _roi_table(lo: tuple, hi: tuple, dims: tuple, out: int):
    """Flat indices of each output cell's members (ascending, padded by repetition) and a nonempty mask."""
    D, H, W = dims
    edges = [roi_bins(lo[i], hi[i], n, out) for i, n in enumerate(dims)]
    cells, valid = [], []
    for d0, d1 in edges[0]:
        for h0, h1 in edges[1]:
            for w0, w1 in edges[2]:
                idx = [(d * H + h) * W + w for d in range(d0, d1) for h in range(h0, h1) for w in range(w0, w1)]
                valid.append(bool(idx))
                cells.append(idx or [0])
    width = max(len(c) for c in cells)
    table = np.array([c + [c[0]] * (width - len(c)) for c in cells], dtype=np.int64)
    return table, np.array(valid)


def roi_maxpool3d(feature: Tensor, roi, out: int = 6, return_flag: bool = False):
    """Max-pool an axis-aligned box ``(lo, hi)`` in feature-grid coordinates onto an out^3 lattice.

    Cells that fall entirely outside the grid read 0. Ties go to the lowest flat index.
    """
    fd, single = _as5d(feature.data)
    N, C, D, H, W = fd.shape
    lo = tuple(float(v) for v in np.asarray(roi[0], float))
    hi = tuple(float(v) for v in np.asarray(roi[1], float))
    table, valid = _roi_table(lo, hi, (D, H, W), out)
    flat = fd.reshape(N, C, -1)
    members = flat[:, :, table]  # N, C, cells, width
    arg = members.argmax(axis=-1)
    src = np.take_along_axis(np.broadcast_to(table, members.shape), arg[..., None], axis=-1)[..., 0]
    vals = np.where(valid, np.take_along_axis(members, arg[..., None], axis=-1)[..., 0], 0).astype(fd.dtype)
    vals = vals.reshape(N, C, out, out, out)
    flagged = not valid.any()

    def back(g):
        g3 = (g[None] if single else g).reshape(N, C, -1)
        base = (np.arange(N)[:, None, None] * C + np.arange(C)[None, :, None]) * (D * H * W)
        m = np.broadcast_to(valid, g3.shape)
        dx = np.bincount((base + src)[m], weights=g3[m], minlength=N * C * D * H * W).astype(fd.dtype)
        dx = dx.reshape(N, C, D, H, W)
        return (dx[0] if single else dx,)

    t = Tensor(vals[0] if single else vals, parents=(feature,), backward=back)
    return (t, flagged) if return_flag else t


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``w @ x + b`` for x of shape [n] or [N, n]."""
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape} do not agree")
    out = x.data @ w.data.T + b.data

    def back(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        return (g @ w.data, g2.T @ x2, g2.sum(axis=0))

    return Tensor(out, parents=(x, w, b), backward=back)


def grouped_dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Separate affine map per group: x [N, G, n], w [G, m, n], b [G, m] -> [N, G, m]."""
    out = np.einsum("ngi,goi->ngo", x.data, w.data) + b.data

    def back(g):
        return (np.einsum("ngo,goi->ngi", g, w.data), np.einsum("ngo,ngi->goi", g, x.data), g.sum(axis=0))

    return Tensor(out, parents=(x, w, b), backward=back)


def flatten(x: Tensor, batched: bool = True) -> Tensor:
    return reshape(x, (x.shape[0], -1) if batched else (-1,))


# -- losses -------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label, weight=None) -> Tensor:
    """Mean over the batch of -log p[label]; gradient p - one_hot(label)."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n = z2.shape[-1]
    if labels.shape[0] != z2.shape[0]:
        raise ValueError("one label per row is required")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range [0, {n})")
    w = np.ones(len(labels), dtype=z.dtype) if weight is None else np.asarray(weight, dtype=z.dtype)
    shifted = z2 - z2.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(len(labels))
    nll = logsum - shifted[rows, labels]
    norm = len(labels)
    loss = (w * nll).sum() / norm

    def back(g):
        p = softmax(z2)
        p[rows, labels] -= 1
        d = p * (w / norm)[:, None] * g
        return (d[0] if single else d,)

    return Tensor(np.asarray(loss, dtype=z.dtype), parents=(logits,), backward=back)


def smooth_l1(pred: Tensor, target, weight=None) -> Tensor:
    """Sum of 0.5 x^2 (|x| < 1) or |x| - 0.5 over elements, optionally weighted."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"smooth_l1: shapes {pred.shape} and {t.shape} differ")
    x = pred.data - t
    ax = np.abs(x)
    elem = np.where(ax < 1, 0.5 * x * x, ax - 0.5)
    w = np.ones_like(x) if weight is None else np.broadcast_to(np.asarray(weight, dtype=pred.dtype), x.shape)
    grad = np.where(ax < 1, x, np.sign(x)) * w
    return Tensor(np.asarray((elem * w).sum(), dtype=pred.dtype), parents=(pred,), backward=lambda g: (grad * g,))


# -- parameters, optimisation, serialisation ---------------------------------


@dataclass
class LayerSpec:
    kind: str  # conv3d | maxpool3d | relu | dense | softmax | roi_maxpool3d | grouped_dense
    name: str = ""
    hyper: dict = field(default_factory=dict)

    KINDS = ("conv3d", "maxpool3d", "relu", "dense", "softmax", "roi_maxpool3d", "grouped_dense")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Holds named parameter tensors grouped by layer; subclasses define ``forward``."""

    def __init__(self):
        self.params: dict = {}  # layer name -> {param name -> Tensor}
        self.specs: list = []

    def add_conv(self, name, rng, cin, cout, k=3, stride=1, padding=1, dtype=np.float32):
        fan = cin * k ** 3
        self.params[name] = {"weight": parameter(init_uniform(rng, (cout, cin, k, k, k), fan, dtype)),
                             "bias": parameter(init_uniform(rng, (cout,), fan, dtype))}
        self.specs.append(LayerSpec("conv3d", name, {"in": cin, "out": cout, "kernel": k,
                                                     "stride": stride, "padding": padding}))

    def add_dense(self, name, rng, nin, nout, dtype=np.float32):
        self.params[name] = {"weight": parameter(init_uniform(rng, (nout, nin), nin, dtype)),
                             "bias": parameter(init_uniform(rng, (nout,), nin, dtype))}
        self.specs.append(LayerSpec("dense", name, {"in": nin, "out": nout}))

    def add_grouped_dense(self, name, rng, groups, nin, nout, dtype=np.float32):
        self.params[name] = {"weight": parameter(init_uniform(rng, (groups, nout, nin), nin, dtype)),
                             "bias": parameter(init_uniform(rng, (groups, nout), nin, dtype))}
        self.specs.append(LayerSpec("grouped_dense", name, {"groups": groups, "in": nin, "out": nout}))

    def conv(self, name, x):
        spec = next(s for s in self.specs if s.name == name)
        p = self.params[name]
        return conv3d(x, p["weight"], p["bias"], spec.hyper["stride"], spec.hyper["padding"])

    def dense(self, name, x):
        p = self.params[name]
        return dense(x, p["weight"], p["bias"])

    def parameters(self) -> list:
        return [t for layer in self.params.values() for t in layer.values()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state(self) -> dict:
        return {f"{l}.{n}": t.data.copy() for l, ps in self.params.items() for n, t in ps.items()}

    def load_state(self, state: dict, strict: bool = True):
        for l, ps in self.params.items():
            for n, t in ps.items():
                key = f"{l}.{n}"
                if key not in state:
                    if strict:
                        raise KeyError(f"missing weights for {key}")
                    continue
                if state[key].shape != t.shape:
                    raise ValueError(f"{key}: shape {state[key].shape} != {t.shape}")
                t.data = state[key].astype(t.dtype).copy()

    def digest(self) -> str:
        return weights_digest(self.state())

    def save(self, directory) -> None:
        save_weights(directory, self.state(), self.specs)

    def load(self, directory) -> None:
        self.load_state(load_weights(directory))


def weights_digest(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(np.ascontiguousarray(state[key], dtype="<f4").tobytes())
    return h.hexdigest()


def save_weights(directory, state: dict, specs=()) -> None:
    """Manifest JSON (layers and shapes) plus one little-endian float32 blob per layer."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = {}
    for key in sorted(state):
        layer, name = key.rsplit(".", 1)
        layers.setdefault(layer, []).append((name, state[key]))
    manifest = {"layers": [], "digest": weights_digest(state)}
    kinds = {s.name: s for s in specs}
    for layer, items in layers.items():
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in items)
        (d / f"{layer}.bin").write_bytes(blob)
        spec = kinds.get(layer)
        manifest["layers"].append({
            "name": layer,
            "kind": spec.kind if spec else None,
            "hyper": spec.hyper if spec else {},
            "params": [{"name": n, "shape": list(a.shape)} for n, a in items],
            "file": f"{layer}.bin",
        })
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_weights(directory) -> dict:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    state = {}
    for layer in manifest["layers"]:
        raw = np.frombuffer((d / layer["file"]).read_bytes(), dtype="<f4")
        off = 0
        for p in layer["params"]:
            n = int(np.prod(p["shape"]))
            state[f"{layer['name']}.{p['name']}"] = raw[off:off + n].reshape(p["shape"]).astype(np.float32)
            off += n
    return state


class SGD:
    """Momentum SGD whose step averages gradients accumulated over micro-batches."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, accum_count: int = 1):
        sgd_step(self.params, self.velocity, self.lr, self.momentum, accum_count, self.weight_decay)


class Adam:
    """Adam on gradients averaged over ``accum_count`` micro-batches."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, accum_count: int = 1):
        if accum_count < 1:
            raise ValueError("accum_count must be >= 1")
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad / accum_count
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            p.grad = None


def sgd_step(params, velocity, lr: float, momentum: float, accum_count: int = 1, weight_decay: float = 0.0):
    if accum_count < 1:
        raise ValueError("accum_count must be >= 1")
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        g = p.grad / accum_count
        if weight_decay:
            g = g + weight_decay * p.data
        v *= momentum
        v += g
        p.data -= (lr * v).astype(p.dtype)
        p.grad = None


def grad_check(fn, tensors, eps: float = 1e-3) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps no arguments to a scalar Tensor built from ``tensors``.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            an = float(a.reshape(-1)[i])
            denom = max(abs(an), abs(num))
            if denom > 1e-9:
                worst = max(worst, abs(an - num) / denom)
    for t in tensors:
        t.grad = None
    return worst
