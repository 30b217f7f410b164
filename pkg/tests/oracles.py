"""Independent reference implementations used only by the tests."""

import contextlib
import itertools
import math

import numpy as np

from octoconv import tensor as T
from octoconv.layers import EquivariantBatchNorm, GConv3d


def naive_conv3d(x, w, stride=(1, 1, 1), padding="valid"):
    """Six nested loops (plus the channel sum), float64 accumulation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c_in, D, H, W = x.shape
    c_out, _, kz, ky, kx = w.shape
    sz, sy, sx = stride
    if padding == "same":
        pads = []
        for size, k, s in zip((D, H, W), (kz, ky, kx), stride):
            out = -(-size // s)
            total = max((out - 1) * s + k - size, 0)
            pads.append((total // 2, total - total // 2))
        x = np.pad(x, [(0, 0), (0, 0), *pads])
        D, H, W = x.shape[2:]
    oz, oy, ox = (D - kz) // sz + 1, (H - ky) // sy + 1, (W - kx) // sx + 1
    out = np.zeros((n, c_out, oz, oy, ox))
    for b in range(n):
        for o in range(c_out):
            for i in range(oz):
                for j in range(oy):
                    for k in range(ox):
                        patch = x[b, :, i * sz : i * sz + kz, j * sy : j * sy + ky, k * sx : k * sx + kx]
                        out[b, o, i, j, k] = np.sum(patch * w[o])
    return out


def central_diff(f, x, eps=1e-3, n_probe=None, rng=None):
    """Numerical gradient of scalar ``f`` at float64 copy of ``x``.

    With ``n_probe`` only that many random coordinates are probed; the
    returned mask marks them.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    idx = range(flat.size)
    if n_probe is not None and n_probe < flat.size:
        rng = np.random.default_rng(rng)
        idx = rng.choice(flat.size, n_probe, replace=False)
    mask = np.zeros(flat.size, dtype=bool)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
        mask[i] = True
    return grad, mask.reshape(x.shape)


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def brute_force_froc(candidates, references, scan_ids, rates=(0.125, 0.25, 0.5, 1, 2, 4, 8)):
    """Enumerate every threshold; for each, recount hits and false positives
    directly from raw candidates and references."""
    n_scans = len(set(scan_ids) | {r.scan_id for r in references})
    relevant = [i for i, r in enumerate(references) if r.relevant]

    def owner(c):
        best, bd = None, math.inf
        for i, r in enumerate(references):
            if r.scan_id != c.scan_id:
                continue
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(c.position, r.center)))
            if d < r.diameter / 2 and d < bd:
                best, bd = i, d
        return best

    owners = [owner(c) for c in candidates]
    thresholds = [math.inf] + sorted({c.probability for c in candidates})
    points = []
    for t in thresholds:
        detected = set()
        fps = 0
        for c, o in zip(candidates, owners):
            if c.probability < t:
                continue
            if o is None:
                fps += 1
            elif references[o].relevant:
                detected.add(o)
        points.append((fps / n_scans, len(detected) / len(relevant)))
    sens = []
    for r in rates:
        sens.append(max((s for f, s in points if f <= r), default=0.0))
    return sum(sens) / len(sens)


def all_closure(gens):
    """Closure of a generator list by repeated multiplication until fixpoint."""
    els = {np.eye(3, dtype=int).tobytes(): np.eye(3, dtype=int)}
    changed = True
    while changed:
        changed = False
        for a, b in itertools.product(list(els.values()), [np.asarray(g, dtype=int) for g in gens]):
            m = a @ b
            if m.tobytes() not in els:
                els[m.tobytes()] = m
                changed = True
    return list(els.values())


@contextlib.contextmanager
def double_precision():
    """Run the package kernels in float64 (for difference quotients only)."""
    from octoconv import tensor as T

    saved = T.DTYPE
    T.DTYPE = np.float64
    try:
        yield
    finally:
        T.DTYPE = saved


def layer_gradient_errors(layer, x, rng, eps=1e-3, n_probe=25, training=True, before_forward=None):
    """Relative errors of a layer's float32 backward pass against central
    differences of its forward pass evaluated in double precision.

    The scalar probed is ``sum(forward(x) * proj)`` for a fixed random
    ``proj``. ``before_forward`` (if given) runs before every forward pass,
    e.g. to re-seed a dropout mask. Returns ``{"input": err, param: err}``.
    """
    rng = np.random.default_rng(rng)
    hook = before_forward or (lambda: None)
    x = np.asarray(x, dtype=np.float64)
    hook()
    out = layer.forward(x.astype(np.float32), training=training)
    proj = rng.standard_normal(out.shape)
    hook()
    layer.forward(x.astype(np.float32), training=training)
    gx = layer.backward(proj.astype(np.float32))
    analytic = {k: np.array(v, dtype=np.float64) for k, v in layer.grads.items()}
    originals = {k: v.copy() for k, v in layer.params.items()}

    def value(xx, overrides):
        hook()
        for k, v in originals.items():
            layer.params[k] = overrides.get(k, v).astype(np.float64)
        with double_precision():
            y = layer.forward(xx, training=training)
        for k, v in originals.items():
            layer.params[k] = v
        return float(np.sum(np.asarray(y, dtype=np.float64) * proj))

    errors = {}
    num, mask = central_diff(lambda xx: value(xx, {}), x, eps=eps, n_probe=n_probe, rng=rng)
    errors["input"] = rel_error(np.asarray(gx)[mask], num[mask])
    for name, p in originals.items():
        num, mask = central_diff(lambda pp, name=name: value(x, {name: pp}), p.astype(np.float64),
                                 eps=eps, n_probe=n_probe, rng=rng)
        errors[name] = rel_error(analytic[name][mask], num[mask])
    return errors


def randomize_bn(net, rng):
    for layer in net.layers:
        if isinstance(layer, EquivariantBatchNorm):
            k = layer.n_features
            layer.running_mean[...] = rng.normal(0, 0.2, k)
            layer.running_var[...] = rng.uniform(0.5, 2.0, k)
            layer.params["gamma"][...] = rng.uniform(0.5, 1.5, k)
            layer.params["beta"][...] = rng.normal(0, 0.2, k)
        elif isinstance(layer, GConv3d):
            layer.params["bias"][...] = rng.normal(0, 0.1, layer.n_out)


def plain_cnn(net, x):
    """The baseline written directly with tensor primitives (eval mode)."""
    h = x
    for layer in net.layers:
        kind = type(layer).__name__
        if kind == "GConv3d":
            f = layer.params["filters"]
            f = f.reshape(f.shape[0], -1, *f.shape[-3:])  # fold the size-1 orientation axis
            h = T.conv3d_forward(h, f, layer.spec) + layer.params["bias"][None, :, None, None, None]
        elif kind == "EquivariantBatchNorm":
            inv = (1.0 / np.sqrt(layer.running_var + np.float32(layer.eps))).astype(np.float32)
            s = (None, slice(None), None, None, None)
            h = (h - layer.running_mean[s]) * inv[s] * layer.params["gamma"][s] + layer.params["beta"][s]
        elif kind == "ReLU":
            h = np.maximum(h, 0)
        elif kind == "MaxPool3d":
            h = T.max_pool3d_forward(h, 2)[0]
        elif kind == "Dense":
            h = h.reshape(len(h), -1) @ layer.params["weight"].T + layer.params["bias"]
    return h
