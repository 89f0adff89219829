"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``TRISTREAM_NUMBA`` is not set to ``0``.  Both implementations are
always importable (``*_numpy`` / ``*_numba``) so tests and the benchmark can
compare them directly; the unsuffixed names are bound to the selected path.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("TRISTREAM_NUMBA", "1") != "0"


def _optional_njit(func):
    if HAS_NUMBA:
        return njit(cache=True, nogil=True)(func)
    return func


# ---------------------------------------------------------------------------
# vol2col / col2vol
#
# xp:   (N, C, Tp, Hp, Wp) already padded input
# cols: (N, C, kt, kh, kw, To, Ho, Wo)
# cols[n, c, i, j, k, t, h, w] = xp[n, c, t*st + i*dt, h*sh + j*dh, w*sw + k*dw]
# ---------------------------------------------------------------------------


def vol2col_numpy(xp, ksize, stride, dilation, out_size):
    kt, kh, kw = ksize
    st, sh, sw = stride
    dt, dh, dw = dilation
    To, Ho, Wo = out_size
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kt, kh, kw, To, Ho, Wo), dtype=xp.dtype)
    for i in range(kt):
        t0 = i * dt
        for j in range(kh):
            h0 = j * dh
            for k in range(kw):
                w0 = k * dw
                cols[:, :, i, j, k] = xp[
                    :, :,
                    t0:t0 + st * (To - 1) + 1:st,
                    h0:h0 + sh * (Ho - 1) + 1:sh,
                    w0:w0 + sw * (Wo - 1) + 1:sw,
                ]
    return cols


def col2vol_numpy(cols, padded_shape, stride, dilation):
    n, c, kt, kh, kw, To, Ho, Wo = cols.shape
    st, sh, sw = stride
    dt, dh, dw = dilation
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kt):
        t0 = i * dt
        for j in range(kh):
            h0 = j * dh
            for k in range(kw):
                w0 = k * dw
                # a fixed kernel offset maps output positions injectively
                out[
                    :, :,
                    t0:t0 + st * (To - 1) + 1:st,
                    h0:h0 + sh * (Ho - 1) + 1:sh,
                    w0:w0 + sw * (Wo - 1) + 1:sw,
                ] += cols[:, :, i, j, k]
    return out


@_optional_njit
def _vol2col_loops(xp, cols, st, sh, sw, dt, dh, dw):
    n, c, kt, kh, kw, To, Ho, Wo = cols.shape
    for a in range(n):
        for b in range(c):
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        for t in range(To):
                            ti = t * st + i * dt
                            for h in range(Ho):
                                hi = h * sh + j * dh
                                for w in range(Wo):
                                    cols[a, b, i, j, k, t, h, w] = xp[a, b, ti, hi, w * sw + k * dw]


@_optional_njit
def _col2vol_loops(cols, out, st, sh, sw, dt, dh, dw):
    n, c, kt, kh, kw, To, Ho, Wo = cols.shape
    for a in range(n):
        for b in range(c):
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        for t in range(To):
                            ti = t * st + i * dt
                            for h in range(Ho):
                                hi = h * sh + j * dh
                                for w in range(Wo):
                                    out[a, b, ti, hi, w * sw + k * dw] += cols[a, b, i, j, k, t, h, w]


def vol2col_numba(xp, ksize, stride, dilation, out_size):
    n, c = xp.shape[:2]
    cols = np.empty((n, c) + tuple(ksize) + tuple(out_size), dtype=xp.dtype)
    _vol2col_loops(np.ascontiguousarray(xp), cols, *stride, *dilation)
    return cols


def col2vol_numba(cols, padded_shape, stride, dilation):
    out = np.zeros(padded_shape, dtype=cols.dtype)
    _col2vol_loops(np.ascontiguousarray(cols), out, *stride, *dilation)
    return out


# ---------------------------------------------------------------------------
# 3D max pooling (no padding). argidx holds the flat index into T*H*W of the
# winning input element; ties go to the lowest flat index.
# ---------------------------------------------------------------------------


def maxpool3d_forward_numpy(x, ksize, stride, out_size):
    n, c, T, H, W = x.shape
    cols = vol2col_numpy(x, ksize, stride, (1, 1, 1), out_size)
    K = ksize[0] * ksize[1] * ksize[2]
    cols = cols.reshape(n, c, K, -1)
    win = np.argmax(cols, axis=2)  # first occurrence == lowest flat index
    out = np.take_along_axis(cols, win[:, :, None, :], axis=2)[:, :, 0, :]
    # translate (window offset, output position) to the input flat index
    kt, kh, kw = ksize
    i, rem = np.divmod(win, kh * kw)
    j, k = np.divmod(rem, kw)
    To, Ho, Wo = out_size
    pos = np.arange(To * Ho * Wo)
    t, rem = np.divmod(pos, Ho * Wo)
    h, w = np.divmod(rem, Wo)
    ti = t * stride[0] + i
    hi = h * stride[1] + j
    wi = w * stride[2] + k
    argidx = (ti * H + hi) * W + wi
    return out.reshape(n, c, To, Ho, Wo), argidx.reshape(n, c, To, Ho, Wo).astype(np.int64)


def maxpool3d_backward_numpy(gout, argidx, in_shape):
    n, c, T, H, W = in_shape
    gflat = gout.reshape(n * c, -1)
    idx = argidx.reshape(n * c, -1) + (np.arange(n * c) * (T * H * W))[:, None]
    gx = np.bincount(idx.ravel(), weights=gflat.ravel(), minlength=n * c * T * H * W)
    return gx.astype(gout.dtype).reshape(in_shape)


@_optional_njit
def _maxpool_fwd_loops(x, out, argidx, kt, kh, kw, st, sh, sw):
    n, c, T, H, W = x.shape
    _, _, To, Ho, Wo = out.shape
    for a in range(n):
        for b in range(c):
            for t in range(To):
                for h in range(Ho):
                    for w in range(Wo):
                        best = x[a, b, t * st, h * sh, w * sw]
                        bi = ((t * st) * H + h * sh) * W + w * sw
                        for i in range(kt):
                            ti = t * st + i
                            for j in range(kh):
                                hi = h * sh + j
                                for k in range(kw):
                                    wi = w * sw + k
                                    v = x[a, b, ti, hi, wi]
                                    if v > best:
                                        best = v
                                        bi = (ti * H + hi) * W + wi
                        out[a, b, t, h, w] = best
                        argidx[a, b, t, h, w] = bi


@_optional_njit
def _maxpool_bwd_loops(gout, argidx, gx):
    n, c, To, Ho, Wo = gout.shape
    for a in range(n):
        for b in range(c):
            for t in range(To):
                for h in range(Ho):
                    for w in range(Wo):
                        gx[a, b, argidx[a, b, t, h, w]] += gout[a, b, t, h, w]


def maxpool3d_forward_numba(x, ksize, stride, out_size):
    n, c = x.shape[:2]
    out = np.empty((n, c) + tuple(out_size), dtype=x.dtype)
    argidx = np.empty((n, c) + tuple(out_size), dtype=np.int64)
    _maxpool_fwd_loops(np.ascontiguousarray(x), out, argidx, *ksize, *stride)
    return out, argidx


def maxpool3d_backward_numba(gout, argidx, in_shape):
    n, c, T, H, W = in_shape
    gx = np.zeros((n, c, T * H * W), dtype=gout.dtype)
    _maxpool_bwd_loops(np.ascontiguousarray(gout), argidx, gx)
    return gx.reshape(in_shape)


# ---------------------------------------------------------------------------
# ROI align: one bilinear sample at the centre of each output cell, applied
# identically at every temporal index.
#
# feat: (N, C, T, H, W); rois: (B, 5) = [batch, x1, y1, x2, y2] in feature
# pixel units (pixel k spans [k, k+1]).  Output (B, C, T, oh, ow).
# ---------------------------------------------------------------------------


def roi_sample_points(roi, out_h, out_w):
    """Sample coordinates (in pixel-index space) for one ROI."""
    _, x1, y1, x2, y2 = roi
    ys = y1 + (np.arange(out_h) + 0.5) * (y2 - y1) / out_h - 0.5
    xs = x1 + (np.arange(out_w) + 0.5) * (x2 - x1) / out_w - 0.5
    return ys, xs


def _interp_params(coords, size):
    c = np.clip(coords, 0.0, size - 1.0)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = c - lo
    return lo, hi, frac


def roi_align_forward_numpy(feat, rois, out_h, out_w):
    n, c, T, H, W = feat.shape
    out = np.empty((rois.shape[0], c, T, out_h, out_w), dtype=feat.dtype)
    for r, roi in enumerate(rois):
        ys, xs = roi_sample_points(roi, out_h, out_w)
        y0, y1, ly = _interp_params(ys, H)
        x0, x1, lx = _interp_params(xs, W)
        f = feat[int(roi[0])]
        ly = ly[:, None]
        lx = lx[None, :]
        val = (
            f[:, :, y0[:, None], x0[None, :]] * ((1 - ly) * (1 - lx))
            + f[:, :, y0[:, None], x1[None, :]] * ((1 - ly) * lx)
            + f[:, :, y1[:, None], x0[None, :]] * (ly * (1 - lx))
            + f[:, :, y1[:, None], x1[None, :]] * (ly * lx)
        )
        out[r] = val
    return out


def roi_align_backward_numpy(gout, rois, feat_shape):
    n, c, T, H, W = feat_shape
    out_h, out_w = gout.shape[3:]
    gfeat = np.zeros((n, c, T, H * W), dtype=np.float64)
    for r, roi in enumerate(rois):
        ys, xs = roi_sample_points(roi, out_h, out_w)
        y0, y1, ly = _interp_params(ys, H)
        x0, x1, lx = _interp_params(xs, W)
        g = gout[r].reshape(c, T, -1).astype(np.float64)
        target = gfeat[int(roi[0])]
        ly = ly[:, None]
        lx = lx[None, :]
        for yy, xx, wgt in (
            (y0, x0, (1 - ly) * (1 - lx)),
            (y0, x1, (1 - ly) * lx),
            (y1, x0, ly * (1 - lx)),
            (y1, x1, ly * lx),
        ):
            idx = (yy[:, None] * W + xx[None, :]).ravel()
            contrib = g * wgt.ravel()
            for p, q in enumerate(idx):
                target[:, :, q] += contrib[:, :, p]
    return gfeat.reshape(feat_shape).astype(gout.dtype)


@_optional_njit
def _bilinear_setup(coord, size):
    if coord < 0.0:
        coord = 0.0
    if coord > size - 1.0:
        coord = size - 1.0
    lo = int(np.floor(coord))
    hi = lo + 1 if lo + 1 < size else size - 1
    return lo, hi, coord - lo


@_optional_njit
def _roi_fwd_loops(feat, rois, out):
    B, C, T, oh, ow = out.shape
    H = feat.shape[3]
    W = feat.shape[4]
    for r in range(B):
        b = int(rois[r, 0])
        x1 = rois[r, 1]
        y1 = rois[r, 2]
        bw = (rois[r, 3] - x1) / ow
        bh = (rois[r, 4] - y1) / oh
        for p in range(oh):
            y0i, y1i, ly = _bilinear_setup(y1 + (p + 0.5) * bh - 0.5, H)
            for q in range(ow):
                x0i, x1i, lx = _bilinear_setup(x1 + (q + 0.5) * bw - 0.5, W)
                w00 = (1 - ly) * (1 - lx)
                w01 = (1 - ly) * lx
                w10 = ly * (1 - lx)
                w11 = ly * lx
                for ch in range(C):
                    for t in range(T):
                        out[r, ch, t, p, q] = (
                            feat[b, ch, t, y0i, x0i] * w00
                            + feat[b, ch, t, y0i, x1i] * w01
                            + feat[b, ch, t, y1i, x0i] * w10
                            + feat[b, ch, t, y1i, x1i] * w11
                        )


@_optional_njit
def _roi_bwd_loops(gout, rois, gfeat):
    B, C, T, oh, ow = gout.shape
    H = gfeat.shape[3]
    W = gfeat.shape[4]
    for r in range(B):
        b = int(rois[r, 0])
        x1 = rois[r, 1]
        y1 = rois[r, 2]
        bw = (rois[r, 3] - x1) / ow
        bh = (rois[r, 4] - y1) / oh
        for p in range(oh):
            y0i, y1i, ly = _bilinear_setup(y1 + (p + 0.5) * bh - 0.5, H)
            for q in range(ow):
                x0i, x1i, lx = _bilinear_setup(x1 + (q + 0.5) * bw - 0.5, W)
                w00 = (1 - ly) * (1 - lx)
                w01 = (1 - ly) * lx
                w10 = ly * (1 - lx)
                w11 = ly * lx
                for ch in range(C):
                    for t in range(T):
                        g = gout[r, ch, t, p, q]
                        gfeat[b, ch, t, y0i, x0i] += g * w00
                        gfeat[b, ch, t, y0i, x1i] += g * w01
                        gfeat[b, ch, t, y1i, x0i] += g * w10
                        gfeat[b, ch, t, y1i, x1i] += g * w11


def roi_align_forward_numba(feat, rois, out_h, out_w):
    n, c, T = feat.shape[:3]
    out = np.empty((rois.shape[0], c, T, out_h, out_w), dtype=feat.dtype)
    _roi_fwd_loops(np.ascontiguousarray(feat), np.ascontiguousarray(rois, dtype=np.float64), out)
    return out


def roi_align_backward_numba(gout, rois, feat_shape):
    gfeat = np.zeros(feat_shape, dtype=np.float64)
    _roi_bwd_loops(np.ascontiguousarray(gout), np.ascontiguousarray(rois, dtype=np.float64), gfeat)
    return gfeat.astype(gout.dtype)


IMPLEMENTATIONS = {
    "numpy": dict(
        vol2col=vol2col_numpy,
        col2vol=col2vol_numpy,
        maxpool3d_forward=maxpool3d_forward_numpy,
        maxpool3d_backward=maxpool3d_backward_numpy,
        roi_align_forward=roi_align_forward_numpy,
        roi_align_backward=roi_align_backward_numpy,
    ),
    "numba": dict(
        vol2col=vol2col_numba,
        col2vol=col2vol_numba,
        maxpool3d_forward=maxpool3d_forward_numba,
        maxpool3d_backward=maxpool3d_backward_numba,
        roi_align_forward=roi_align_forward_numba,
        roi_align_backward=roi_align_backward_numba,
    ),
}

BACKEND = "numba" if USE_NUMBA else "numpy"
_selected = IMPLEMENTATIONS[BACKEND]
vol2col = _selected["vol2col"]
col2vol = _selected["col2vol"]
maxpool3d_forward = _selected["maxpool3d_forward"]
maxpool3d_backward = _selected["maxpool3d_backward"]
roi_align_forward = _selected["roi_align_forward"]
roi_align_backward = _selected["roi_align_backward"]
