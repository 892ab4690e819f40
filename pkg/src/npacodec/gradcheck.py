"""Central finite-difference checks of every hand-written backward pass.

All suites run in float64. Each projects the layer output onto a fixed
random tensor to get a scalar loss, then compares the analytic gradient with
(L(x + h e_i) - L(x - h e_i)) / 2h at randomly chosen coordinates.

Relative error is |a - n| / max(|a|, |n|). Coordinates whose gradient is
below ``ZERO_GRAD`` in magnitude (for instance the key bias, which cancels
inside the softmax) are compared absolutely against ``ZERO_GRAD`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mopa import TransitionGeometry, transition_loss
from .nn import attention as A
from .nn import layers as L
from .nn.sconv import kernel_map, sconv_backward, sconv_forward, tsconv_backward, tsconv_forward
from .nn.weights import ModelConfig, init_params
from .sparse_tensor import SparseTensor, expand_octants, knn, neighborhood_33

STEP = 1e-5
# smaller step end to end: many ReLUs lie on the path, so kinks sit closer
E2E_STEP = 1e-6
ZERO_GRAD = 1e-8
LAYER_TOL = 1e-6
E2E_TOL = 1e-3
COORDS = 10


@dataclass
class CheckResult:
    name: str
    max_rel: float
    checked: int
    zero_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max rel err {self.max_rel:.3e} over {self.checked} coords "
            f"({self.zero_coords} zero), tol {self.tol:.0e}"
        )


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < ZERO_GRAD:
        return abs(analytic - numeric) / ZERO_GRAD * LAYER_TOL
    return abs(analytic - numeric) / scale


def check_tensors(name, loss_fn, tensors: dict, grads: dict, rng, coords=COORDS,
                  tol=LAYER_TOL, step=None) -> CheckResult:
    """Perturb ``coords`` random entries of each tensor in place and compare."""
    step = STEP if step is None else step
    worst = 0.0
    checked = zeros = 0
    for key, arr in tensors.items():
        g = np.asarray(grads[key])
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + step
            up = loss_fn()
            flat[i] = old - step
            down = loss_fn()
            flat[i] = old
            num = (up - down) / (2 * step)
            ana = float(g.reshape(-1)[i])
            if max(abs(ana), abs(num)) < ZERO_GRAD:
                zeros += 1
            worst = max(worst, relative_error(ana, num))
            checked += 1
    return CheckResult(name, worst, checked, zeros, tol)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def check_linear(rng):
    x, w, b = rng.standard_normal((6, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    r = rng.standard_normal((6, 4))
    f = lambda: float(np.sum(r * L.linear_forward(x, w, b)[0]))
    dx, dw, db = L.linear_backward(r, x, w)
    return check_tensors("linear", f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, rng)


def check_relu(rng):
    x = _away_from_zero(rng, (7, 5))
    r = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(r * L.relu_forward(x)[0]))
    _, mask = L.relu_forward(x)
    return check_tensors("relu", f, {"x": x}, {"x": L.relu_backward(r, mask)}, rng)


def check_sigmoid(rng):
    x = 3 * rng.standard_normal((7, 5))
    r = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(r * L.sigmoid_forward(x)[0]))
    y, _ = L.sigmoid_forward(x)
    return check_tensors("sigmoid", f, {"x": x}, {"x": L.sigmoid_backward(r, y)}, rng)


def check_softmax(rng):
    x = rng.standard_normal((6, 7))
    mask = rng.random((6, 7)) > 0.3
    mask[:, 0] = True
    r = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(r * L.softmax_forward(x, mask)[0]))
    y, _ = L.softmax_forward(x, mask)
    return check_tensors("softmax", f, {"x": x}, {"x": L.softmax_backward(r, y)}, rng)


def check_layernorm(rng):
    x = rng.standard_normal((6, 8))
    s, t = rng.standard_normal(8), rng.standard_normal(8)
    r = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(r * L.layernorm_forward(x, s, t)[0]))
    _, cache = L.layernorm_forward(x, s, t)
    dx, ds, dt = L.layernorm_backward(r, cache)
    return check_tensors("layernorm", f, {"x": x, "scale": s, "shift": t},
                         {"x": dx, "scale": ds, "shift": dt}, rng)


def _random_tensor(rng, n=24, extent=5):
    c = np.unique(rng.integers(0, extent, size=(n, 3)), axis=0)
    return SparseTensor.build(c)


def check_sconv(rng):
    t = _random_tensor(rng)
    km = kernel_map(neighborhood_33(t))
    x = rng.standard_normal((len(t), 4))
    k = rng.standard_normal((27, 3, 4)) * 0.3
    b = rng.standard_normal(3)
    r = rng.standard_normal((len(t), 3))
    f = lambda: float(np.sum(r * sconv_forward(x, km, k, b)[0]))
    _, cache = sconv_forward(x, km, k, b)
    dx, dk, db = sconv_backward(r, cache, k)
    return check_tensors("sconv", f, {"x": x, "kernel": k, "bias": b},
                         {"x": dx, "kernel": dk, "bias": db}, rng)


def check_tsconv(rng):
    t = _random_tensor(rng, n=8)
    oc = expand_octants(t)
    x = rng.standard_normal((len(t), 4))
    k = rng.standard_normal((1, 3, 4))
    b = rng.standard_normal(3)
    r = rng.standard_normal((len(oc.parent), 3))
    f = lambda: float(np.sum(r * tsconv_forward(x, oc.parent, k, b)[0]))
    _, cache = tsconv_forward(x, oc.parent, k, b)
    dx, dk, db = tsconv_backward(r, cache, k)
    return check_tensors("tsconv", f, {"x": x, "kernel": k, "bias": b},
                         {"x": dx, "kernel": dk, "bias": db}, rng)


def _small_former_params(rng, d=8, heads=2, cph=4):
    cfg = ModelConfig(d=d, heads=heads, cph=cph)
    p = init_params(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    # non-trivial norm parameters and biases so every path carries gradient
    for name in p:
        if name.endswith(("bias", "shift")):
            p[name] = 0.1 * rng.standard_normal(p[name].shape)
        elif name.endswith("scale"):
            p[name] = 1.0 + 0.1 * rng.standard_normal(p[name].shape)
    return p


def check_npa(rng, heads=2, cph=4, d=8, k=5):
    t = _random_tensor(rng, n=20)
    nbh = knn(t, k)
    p = _small_former_params(rng, d, heads, cph)
    pre = "agg.former.npa"
    x = rng.standard_normal((len(t), d))
    r = rng.standard_normal((len(t), d))
    f = lambda: float(np.sum(r * A.npa_forward(x, nbh, p, pre, heads)[0]))
    _, cache = A.npa_forward(x, nbh, p, pre, heads)
    dx, g = A.npa_backward(r, cache, p)
    names = [n for n in p if n.startswith(pre + ".")]
    return check_tensors("npa", f, {"x": x, **{n: p[n] for n in names}},
                         {"x": dx, **{n: g[n] for n in names}}, rng)


def check_npaformer(rng, heads=2, cph=4, d=8, k=5):
    t = _random_tensor(rng, n=20)
    nbh = knn(t, k)
    p = _small_former_params(rng, d, heads, cph)
    pre = "agg.former"
    x = rng.standard_normal((len(t), d))
    r = rng.standard_normal((len(t), d))
    f = lambda: float(np.sum(r * A.npaformer_forward(x, nbh, p, pre, heads)[0]))
    _, cache = A.npaformer_forward(x, nbh, p, pre, heads)
    dx, g = A.npaformer_backward(r, cache, p)
    names = [n for n in p if n.startswith(pre + ".")]
    return check_tensors("npaformer", f, {"x": x, **{n: p[n] for n in names}},
                         {"x": dx, **{n: g[n] for n in names}}, rng)


def check_bce(rng):
    from .trainer import bce_loss

    probs = rng.uniform(0.05, 0.95, size=40)
    bits = (rng.random(40) < 0.5).astype(np.int8)
    f = lambda: bce_loss(probs, bits)[0]
    _, g = bce_loss(probs, bits)
    return check_tensors("bce", f, {"probs": probs}, {"probs": g}, rng)


def check_mopa(rng, coords=20, k=6):
    """End-to-end teacher-forced loss of one transition w.r.t. model weights."""
    from .trainer import bce_sum

    parents = _random_tensor(rng, n=10, extent=4)
    geom = TransitionGeometry.build(parents)
    truth = (rng.random(len(geom.children.octant)) < 0.4).astype(np.int8)
    cfg = ModelConfig()
    p = init_params(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for name in p:
        if name.endswith(("bias", "shift")):
            p[name] = 0.05 * rng.standard_normal(p[name].shape)
    f = lambda: transition_loss(p, cfg.heads, k, parents, truth, bce_sum, need_grad=False)[0]
    _, _, grads = transition_loss(p, cfg.heads, k, parents, truth, bce_sum)
    # spread the budget over randomly chosen tensors, one coordinate each
    names = sorted(p)
    chosen = rng.choice(len(names), size=coords, replace=False)
    tensors = {names[i]: p[names[i]] for i in chosen}
    return check_tensors("mopa end-to-end", f, tensors, {n: grads[n] for n in tensors}, rng,
                         coords=1, tol=E2E_TOL, step=E2E_STEP)


LAYER_SUITES = (
    check_linear, check_relu, check_sigmoid, check_softmax, check_layernorm,
    check_sconv, check_tsconv, check_npa, check_npaformer, check_bce,
)


def run_all(seed: int = 0, e2e: bool = True) -> list:
    rng = np.random.default_rng(seed)
    results = [suite(rng) for suite in LAYER_SUITES]
    if e2e:
        results.append(check_mopa(rng))
    return results
