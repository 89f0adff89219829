"""Central finite-difference gradient checks for every op kind and both heads.

All checks run in float64.  The error for one gradient element is
``|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)``; the floor keeps
elements whose true gradient is ~0 from dominating through division.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import Tensor

STEP = 1e-3
TOL = 1e-3
KINK_TOL = 3e-3
KINK_MARGIN = 1e-2
FLOOR = 1e-2
# normalised groups with a smaller spread are too curved for a 1e-3 central difference
SPREAD_MARGIN = 0.1


def numeric_grad(f: Callable[[], float], t: Tensor, step: float = STEP) -> np.ndarray:
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        out.reshape(-1)[i] = (hi - lo) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.zeros_like(numeric) if analytic is None else analytic
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(a - numeric) / denom)) if numeric.size else 0.0


def check(fn: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator, step: float = STEP) -> float:
    """Max relative error between backward() and central differences of <fn(*inputs), R>."""
    with tn.precision(np.float64):
        out = fn(*inputs)
        proj = Tensor(rng.standard_normal(out.shape)) if out.size > 1 else None

        def loss():
            y = fn(*inputs)
            return tn.sum(tn.mul(y, proj)) if proj is not None else tn.reshape(y, ())

        for t in inputs:
            t.grad = None
        loss().backward()
        worst = 0.0
        for t in inputs:
            if not t.requires_grad:
                continue
            num = numeric_grad(lambda: float(loss().data), t, step)
            worst = max(worst, relative_error(t.grad, num))
        return worst


def _p(rng, *shape, away_from_zero: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < KINK_MARGIN, np.sign(x + 1e-12) * (KINK_MARGIN + np.abs(x)), x)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _distinct(rng, *shape, gap: float = 0.05) -> Tensor:
    """Values spaced by ``gap`` so no two pool candidates are within a step of each other."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap
    return Tensor(vals.reshape(shape), requires_grad=True, dtype=np.float64)


def _dims(rng, k, lo=1, hi=4):
    return [int(v) for v in rng.integers(lo, hi + 1, size=k)]


@dataclass
class Case:
    fn: Callable
    inputs: list
    kink: bool = False


# every builder returns a fresh random Case


def _add(rng):
    s = _dims(rng, 3)
    return Case(tn.add, [_p(rng, *s), _p(rng, *s)])


def _sub(rng):
    s = _dims(rng, 2)
    return Case(tn.sub, [_p(rng, *s), _p(rng, *s)])


def _mul(rng):
    s = _dims(rng, 3)
    return Case(tn.mul, [_p(rng, *s), _p(rng, *s)])


def _scale(rng):
    s, c = _dims(rng, 2), float(rng.normal())
    return Case(lambda x: tn.scale(x, c), [_p(rng, *s)])


def _scale_tensor(rng):
    s = _dims(rng, 3)
    return Case(tn.scale, [_p(rng, *s), _p(rng, 1)])


def _bias_add(rng):
    s = _dims(rng, 4)
    axis = int(rng.integers(0, 4))
    return Case(lambda x, b: tn.bias_add(x, b, axis), [_p(rng, *s), _p(rng, s[axis])])


def _matmul(rng):
    b, m, k, n = _dims(rng, 4)
    if rng.random() < 0.5:
        return Case(tn.matmul, [_p(rng, b, m, k), _p(rng, b, k, n)])
    return Case(tn.matmul, [_p(rng, b, m, k), _p(rng, k, n)])


def _relu(rng):
    return Case(tn.relu, [_p(rng, *_dims(rng, 3), away_from_zero=True)], kink=True)


def _sigmoid(rng):
    return Case(tn.sigmoid, [_p(rng, *_dims(rng, 3))])


def _tanh(rng):
    return Case(tn.tanh, [_p(rng, *_dims(rng, 3))])


def _softmax(rng):
    s = _dims(rng, 3, 1, 5)
    axis = int(rng.integers(0, 3))
    return Case(lambda x: tn.softmax(x, axis), [_p(rng, *s)])


def _log_softmax(rng):
    s = _dims(rng, 2, 1, 5)
    return Case(lambda x: tn.log_softmax(x, -1), [_p(rng, *s)])


def _layernorm(rng):
    for _ in range(200):
        if rng.random() < 0.5:
            t, d = _dims(rng, 2, 2, 6)
            x, axis, kw = _p(rng, t, d), -1, {}
        else:
            s = _dims(rng, 5, 1, 3)
            s[1] = max(s[1], 2)
            x, axis, kw = _p(rng, *s), (1, 2, 3, 4), dict(axis=(1, 2, 3, 4), channel_axis=1)
        if x.data.std(axis=axis).min() < SPREAD_MARGIN:
            continue
        c = x.shape[kw.get("channel_axis", -1)]
        return Case(lambda x, g, b: tn.layernorm(x, g, b, **kw), [x, _p(rng, c), _p(rng, c)])
    raise RuntimeError("could not sample a well-spread layernorm instance")


def _dropout(rng):
    seed, p = int(rng.integers(1 << 30)), float(rng.uniform(0.1, 0.7))
    return Case(lambda x: tn.dropout(x, p, True, np.random.default_rng(seed)), [_p(rng, *_dims(rng, 3))])


def _conv3d(rng):
    n, c, co = _dims(rng, 3, 1, 2)
    k = _dims(rng, 3, 1, 3)
    stride = _dims(rng, 3, 1, 2)
    dil = _dims(rng, 3, 1, 2)
    pad = [int(rng.integers(0, kk)) for kk in k]
    size = [d * (kk - 1) + 1 + int(rng.integers(0, 3)) for d, kk in zip(dil, k)]
    x = _p(rng, n, c, *size)
    w = _p(rng, co, c, *k)
    if rng.random() < 0.5:
        return Case(lambda x, w, b: tn.conv3d(x, w, b, stride, pad, dil), [x, w, _p(rng, co)])
    return Case(lambda x, w: tn.conv3d(x, w, None, stride, pad, dil), [x, w])


def _maxpool3d(rng):
    k = _dims(rng, 3, 1, 2)
    s = _dims(rng, 3, 1, 2)
    size = [kk + int(rng.integers(0, 3)) for kk in k]
    return Case(lambda x: tn.maxpool3d(x, k, s), [_distinct(rng, 1, 2, *size)], kink=True)


def _roi_align(rng):
    c, t = _dims(rng, 2, 1, 2)
    h, w = _dims(rng, 2, 3, 5)
    rois = []
    for b in range(2):
        x1, y1 = rng.uniform(0, w - 1.5), rng.uniform(0, h - 1.5)
        rois.append([b, x1, y1, rng.uniform(x1 + 1, w), rng.uniform(y1 + 1, h)])
    out = tuple(_dims(rng, 2, 1, 3))
    return Case(lambda f: tn.roi_align(f, np.array(rois), out), [_p(rng, 2, c, t, h, w)])


def _reshape(rng):
    a, b, c = _dims(rng, 3)
    return Case(lambda x: tn.reshape(x, (c, a * b)), [_p(rng, a, b, c)])


def _transpose(rng):
    perm = tuple(int(i) for i in rng.permutation(3))
    return Case(lambda x: tn.transpose(x, perm), [_p(rng, *_dims(rng, 3))])


def _concat(rng):
    s = _dims(rng, 3)
    axis = int(rng.integers(0, 3))
    s2 = list(s)
    s2[axis] = int(rng.integers(1, 4))
    return Case(lambda a, b: tn.concat([a, b], axis), [_p(rng, *s), _p(rng, *s2)])


def _stack(rng):
    s = _dims(rng, 2)
    return Case(lambda a, b, c: tn.stack([a, b, c], 1), [_p(rng, *s), _p(rng, *s), _p(rng, *s)])


def _take(rng):
    n, t, c = _dims(rng, 3)
    idx = rng.integers(0, t, size=int(rng.integers(1, 6)))
    return Case(lambda x: tn.take(x, idx, 1), [_p(rng, n, t, c)])


def _slice(rng):
    a, b = _dims(rng, 2, 2, 5)
    lo = int(rng.integers(0, b - 1))
    return Case(lambda x: tn.slice_axis(x, lo, b, 1), [_p(rng, a, b)])


def _mean(rng):
    return Case(lambda x: tn.mean(x, axis=(0, 2)), [_p(rng, *_dims(rng, 3))])


def _sum(rng):
    return Case(lambda x: tn.sum(x, axis=1, keepdims=True), [_p(rng, *_dims(rng, 3))])


def _cross_entropy(rng):
    n, k = _dims(rng, 2, 2, 5)
    y = rng.integers(0, k, size=n)
    return Case(lambda z: tn.cross_entropy(z, y), [_p(rng, n, k)])


def _bce(rng):
    n, k = _dims(rng, 2, 1, 4)
    y = (rng.random((n, k)) < 0.5).astype(float)
    return Case(lambda z: tn.bce_with_logits(z, y), [_p(rng, n, k)])


def _fanout(rng):
    # one tensor feeding two consumers: gradients must be summed
    s = _dims(rng, 2)
    return Case(lambda x, w: tn.add(tn.mul(x, w), tn.tanh(x)), [_p(rng, *s), _p(rng, *s)])


def _composite(rng):
    """conv3d -> relu -> maxpool -> matmul -> softmax cross-entropy, resampled off kinks."""
    for _ in range(200):
        x = _p(rng, 1, 2, 2, 4, 4)
        w = _p(rng, 3, 2, 1, 3, 3)
        b = _p(rng, 3)
        fc = _p(rng, 24, 3)
        y = np.array([int(rng.integers(0, 3))])

        def fn(x, w, b, fc):
            h = tn.relu(tn.conv3d(x, w, b, 1, (0, 1, 1)))
            h = tn.maxpool3d(h, (1, 2, 2))
            return tn.cross_entropy(tn.matmul(tn.reshape(h, (1, 24)), fc), y)

        with tn.precision(np.float64):
            pre = tn.conv3d(x, w, b, 1, (0, 1, 1)).data
        if np.min(np.abs(pre)) < KINK_MARGIN:
            continue
        win = np.maximum(pre, 0).reshape(1, 3, 2, 2, 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6).reshape(1, 3, 2, 2, 2, 4)
        top2 = np.sort(win, axis=-1)[..., -2:]
        live = top2[..., 1] > 0
        if np.any(live & (top2[..., 1] - top2[..., 0] < KINK_MARGIN)):
            continue
        return Case(fn, [x, w, b, fc], kink=True)
    raise RuntimeError("could not sample a kink-free composite instance")


def _attention_head(rng):
    """Random block, resampled off FFN relu kinks and away from near-constant norm rows."""
    from .heads import AttentionParams, multi_head_attention

    for _ in range(200):
        h = int(rng.integers(1, 3))
        d = h * int(rng.integers(1, 3)) * 2
        t = int(rng.integers(1, 4))
        with tn.precision(np.float64):
            p = AttentionParams(np.random.default_rng(int(rng.integers(1 << 30))), d, h, ffn_mult=1)
            x = _p(rng, 2, t, d)
            taps = {}
            multi_head_attention(x, p, taps)
        if np.min(np.abs(taps["ffn_pre"])) < KINK_MARGIN:
            continue
        if min(taps["norm1_in"].std(axis=-1).min(), taps["norm2_in"].std(axis=-1).min()) < SPREAD_MARGIN:
            continue
        params = [v for _, v in p.named_parameters()]
        return Case(lambda x, *_: multi_head_attention(x, p), [x, *params], kink=True)
    raise RuntimeError("could not sample a kink-free attention instance")


def _scaled_dot_attention(rng):
    from .heads import scaled_dot_attention

    t, dk, dv = _dims(rng, 3, 1, 4)
    return Case(scaled_dot_attention, [_p(rng, t, dk), _p(rng, t, dk), _p(rng, t, dv)])


def _lstm_cell(rng):
    from .heads import LstmLayer, lstm_cell

    d, hid, n = _dims(rng, 3, 1, 3)
    with tn.precision(np.float64):
        p = LstmLayer(np.random.default_rng(int(rng.integers(1 << 30))), d, hid)
    return Case(lambda x, h, c, *_: lstm_cell(x, h, c, p)[0] * 1.0 + lstm_cell(x, h, c, p)[1],
                [_p(rng, n, d), _p(rng, n, hid), _p(rng, n, hid), p.w_x, p.w_h, p.b])


def _bilstm_head(rng):
    from .heads import LstmParams, bilstm_head

    d, hid = _dims(rng, 2, 1, 3)
    t = int(rng.integers(1, 4))
    with tn.precision(np.float64):
        p = LstmParams(np.random.default_rng(int(rng.integers(1 << 30))), d, hid)
    params = [v for _, v in p.named_parameters()]
    return Case(lambda x, *_: bilstm_head(x, p), [_p(rng, 2, t, d), *params])


OPS = {
    "add": _add, "sub": _sub, "mul": _mul, "scale": _scale, "scale_tensor": _scale_tensor,
    "bias_add": _bias_add, "matmul": _matmul, "relu": _relu, "sigmoid": _sigmoid, "tanh": _tanh,
    "softmax": _softmax, "log_softmax": _log_softmax, "layernorm": _layernorm, "dropout": _dropout,
    "conv3d": _conv3d, "maxpool3d": _maxpool3d, "roi_align": _roi_align, "reshape": _reshape,
    "transpose": _transpose, "concat": _concat, "stack": _stack, "take": _take, "slice": _slice,
    "mean": _mean, "sum": _sum, "cross_entropy": _cross_entropy, "bce_with_logits": _bce,
    "fanout": _fanout, "composite": _composite,
    "scaled_dot_attention": _scaled_dot_attention, "lstm_cell": _lstm_cell,
    "attention_head": _attention_head, "bilstm_head": _bilstm_head,
}


@dataclass
class GradcheckResult:
    op: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_op(name: str, instances: int = 20, seed: int = 0) -> GradcheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    tol = TOL
    for _ in range(instances):
        case = OPS[name](rng)
        if case.kink:
            tol = KINK_TOL
        worst = max(worst, check(case.fn, case.inputs, rng))
    return GradcheckResult(name, instances, worst, tol)


def run_all(instances: int = 20, seed: int = 0, ops=None) -> list[GradcheckResult]:
    return [run_op(name, instances, seed) for name in (ops or OPS)]
