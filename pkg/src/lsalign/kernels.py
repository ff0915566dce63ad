"""Spatial kernels: convolution, pooling, bilinear sampling, batchnorm.

All kernels accept a single CHW feature map or an NCHW batch; single maps
are promoted to a batch of one internally.  Bilinear sampling follows the
four-neighbor weighting max(0, 1-|x-m|) * max(0, 1-|y-n|) with zero-padded
exterior, and grid values in [-1, 1] map to pixel coordinates via
(g + 1) / 2 * (extent - 1) so the corners land on pixel centers.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _accumulate, _node


def _promote(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected CHW or NCHW tensor, got {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(gcols: np.ndarray, k: int, stride: int, h: int, w: int, pad: int) -> np.ndarray:
    n = gcols.shape[0]
    ho, wo = gcols.shape[-2], gcols.shape[-1]
    gx = np.zeros((n, gcols.shape[1], h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with optional bias; output extent floor((H+2p-k)/s)+1."""
    xd, squeeze = _promote(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}")
    co, ci, k, _ = weight.shape
    n, c, h, w = xd.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels ({x.shape}), "
                         f"weight expects {ci} ({weight.shape})")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad k={k}, stride={stride}, padding={padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded extent of input {x.shape} with padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wm = weight.data.reshape(co, ci * k * k)
    out = np.matmul(wm, cols)  # (N, Co, Ho*Wo)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        g4 = g[None] if squeeze else g
        gy = g4.reshape(n, co, ho * wo)
        if weight.requires_grad:
            # recompute cols instead of keeping them alive through the tape
            cols_b = _im2col(xp, k, stride, ho, wo)
            gw = np.matmul(gy, cols_b.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gy.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(wm.T, gy).reshape(n, ci, k, k, ho, wo)
            gx = _col2im(gcols, k, stride, h, w, padding)
            _accumulate(x, gx[0] if squeeze else gx)

    prev = (x, weight) if bias is None else (x, weight, bias)
    return _node(out[0] if squeeze else out, prev, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    xd, squeeze = _promote(x)
    n, c, h, w = xd.shape
    ho, wo = h // 2, w // 2
    win = xd[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gwin = np.zeros((n, c, ho, wo, 4), dtype=g4.dtype)
        np.put_along_axis(gwin, arg[..., None], g4[..., None], axis=-1)
        gwin = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((n, c, h, w), dtype=g4.dtype)
        gx[:, :, :2 * ho, :2 * wo] = gwin.reshape(n, c, 2 * ho, 2 * wo)
        _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, (x,), backward)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def _snap_integers(p: np.ndarray) -> np.ndarray:
    # pixel coordinates that are integers up to roundoff are snapped so that
    # identity grids reproduce the input bit-for-bit
    tol = 1e-9 if p.dtype == np.float64 else 1e-5
    r = np.round(p)
    return np.where(np.abs(p - r) <= tol, r, p)


def _gather_setup(fd: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Shared four-neighbor machinery; coordinates are in pixel units."""
    n, c, h, w = fd.shape
    px = _snap_integers(px)
    py = _snap_integers(py)
    x0 = np.floor(px)
    y0 = np.floor(py)
    dx = px - x0
    dy = py - y0
    ix0 = x0.astype(np.int64)
    iy0 = y0.astype(np.int64)
    corners = []
    fv = fd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    base = (np.arange(n, dtype=np.int64) * (h * w))[:, None]
    for (ix, iy, wx, wy) in (
        (ix0, iy0, 1.0 - dx, 1.0 - dy),
        (ix0 + 1, iy0, dx, 1.0 - dy),
        (ix0, iy0 + 1, 1.0 - dx, dy),
        (ix0 + 1, iy0 + 1, dx, dy),
    ):
        valid = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
        idx = base + np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
        corners.append((idx, valid, wx, wy))
    return fv, corners, dx, dy


def _gather_forward(fv, corners, dtype):
    out = None
    for idx, valid, wx, wy in corners:
        vals = fv[idx.reshape(-1)].reshape(*idx.shape, fv.shape[1])
        contrib = vals * (wx * wy * valid)[..., None].astype(dtype)
        out = contrib if out is None else out + contrib
    return out  # (N, L, C)


def bilinear_sample(feature: Tensor, grid: Tensor) -> Tensor:
    """Sample a feature map at normalized grid coordinates (Eq.-8 weighting).

    feature: CHW or NCHW; grid: (Hg, Wg, 2) or (N, Hg, Wg, 2) with channel
    order (x, y) in [-1, 1].  Points outside the map read zero-padded
    exterior.  Differentiable w.r.t. both the feature and the grid.
    """
    fd, squeeze = _promote(feature)
    gd = grid.data
    if squeeze:
        if gd.ndim != 3 or gd.shape[-1] != 2:
            raise ShapeError(f"grid must be (H, W, 2), got {grid.shape}")
        gd = gd[None]
    elif gd.ndim != 4 or gd.shape[-1] != 2 or gd.shape[0] != fd.shape[0]:
        raise ShapeError(f"grid must be (N, H, W, 2) matching feature batch, got {grid.shape}")
    n, c, h, w = fd.shape
    hg, wg = gd.shape[1], gd.shape[2]
    sx = 0.5 * (w - 1)
    sy = 0.5 * (h - 1)
    px = ((gd[..., 0] + 1.0) * sx).reshape(n, hg * wg)
    py = ((gd[..., 1] + 1.0) * sy).reshape(n, hg * wg)

    fv, corners, _, _ = _gather_setup(fd, px, py)
    out = _gather_forward(fv, corners, fd.dtype)  # (N, L, C)
    out4 = out.reshape(n, hg, wg, c).transpose(0, 3, 1, 2)

    def backward(g):
        g4 = g[None] if squeeze else g
        go = g4.transpose(0, 2, 3, 1).reshape(n, hg * wg, c)  # (N, L, C)
        if feature.requires_grad:
            gf = np.zeros_like(fv)
            for idx, valid, wx, wy in corners:
                np.add.at(gf, idx.reshape(-1),
                          (go * (wx * wy * valid)[..., None]).reshape(-1, c))
            gf = gf.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            _accumulate(feature, gf[0] if squeeze else gf)
        if grid.requires_grad:
            gpx = np.zeros((n, hg * wg), dtype=fd.dtype)
            gpy = np.zeros((n, hg * wg), dtype=fd.dtype)
            # d(weight)/dx is -wy for left corners, +wy for right; same by rows
            signs = ((-1, -1), (+1, -1), (-1, +1), (+1, +1))
            for (idx, valid, wx, wy), (sxn, syn) in zip(corners, signs):
                vals = fv[idx.reshape(-1)].reshape(*idx.shape, c)
                dot = (go * vals).sum(axis=-1) * valid
                gpx += dot * (sxn * wy)
                gpy += dot * (syn * wx)
            ggrid = np.stack([gpx * sx, gpy * sy], axis=-1).reshape(n, hg, wg, 2)
            _accumulate(grid, ggrid[0] if squeeze else ggrid)

    return _node(out4[0] if squeeze else out4, (feature, grid), backward)


def deform_taps(feature: Tensor, offsets: Tensor, k: int, padding: int) -> Tensor:
    """Sample the k*k kernel taps at fractionally offset positions.

    feature: CHW or NCHW; offsets: (2*k*k, H, W) or (N, 2*k*k, H, W) holding
    (dx, dy) pairs per tap in pixel units.  Returns (C*k*k, H, W) columns,
    ordered to match a (Cout, C, k, k) weight reshaped to (Cout, C*k*k); a
    1x1 contraction against them realizes the deformable convolution, and
    zero offsets reproduce standard conv2d columns exactly.
    """
    fd, squeeze = _promote(feature)
    od = offsets.data[None] if squeeze else offsets.data
    n, c, h, w = fd.shape
    if od.ndim != 4 or od.shape[0] != n or od.shape[1] != 2 * k * k:
        raise ShapeError(f"offsets must have {2 * k * k} channels, got {offsets.shape}")
    ho, wo = od.shape[2], od.shape[3]

    # base tap positions replicate conv2d's sliding window (stride 1)
    oy, ox = np.meshgrid(np.arange(ho, dtype=fd.dtype), np.arange(wo, dtype=fd.dtype), indexing="ij")
    taps = []
    for t in range(k * k):
        i, j = divmod(t, k)
        px = (ox - padding + j + od[:, 2 * t]).reshape(n, ho * wo)
        py = (oy - padding + i + od[:, 2 * t + 1]).reshape(n, ho * wo)
        taps.append(_gather_setup(fd, px, py))

    outs = [_gather_forward(fv, corners, fd.dtype) for fv, corners, _, _ in taps]
    # (N, L, C) per tap -> (N, C, k*k, L) -> (N, C*k*k, Ho, Wo)
    out = np.stack(outs, axis=2).transpose(0, 3, 2, 1).reshape(n, c * k * k, ho, wo)

    def backward(g):
        g4 = g[None] if squeeze else g
        gt = g4.reshape(n, c, k * k, ho * wo)
        need_f = feature.requires_grad
        gf = np.zeros((n * h * w, c), dtype=fd.dtype) if need_f else None
        go_off = np.zeros_like(od) if offsets.requires_grad else None
        for t, (fv, corners, _, _) in enumerate(taps):
            go = gt[:, :, t].transpose(0, 2, 1)  # (N, L, C)
            if need_f:
                for idx, valid, wx, wy in corners:
                    np.add.at(gf, idx.reshape(-1),
                              (go * (wx * wy * valid)[..., None]).reshape(-1, c))
            if go_off is not None:
                gpx = np.zeros((n, ho * wo), dtype=fd.dtype)
                gpy = np.zeros((n, ho * wo), dtype=fd.dtype)
                signs = ((-1, -1), (+1, -1), (-1, +1), (+1, +1))
                for (idx, valid, wx, wy), (sxn, syn) in zip(corners, signs):
                    vals = fv[idx.reshape(-1)].reshape(*idx.shape, c)
                    dot = (go * vals).sum(axis=-1) * valid
                    gpx += dot * (sxn * wy)
                    gpy += dot * (syn * wx)
                go_off[:, 2 * t] = gpx.reshape(n, ho, wo)
                go_off[:, 2 * t + 1] = gpy.reshape(n, ho, wo)
        if need_f:
            gf4 = gf.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            _accumulate(feature, gf4[0] if squeeze else gf4)
        if go_off is not None:
            _accumulate(offsets, go_off[0] if squeeze else go_off)

    return _node(out[0] if squeeze else out, (feature, offsets), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batchnorm over (N, H, W); updates running stats in training."""
    xd, squeeze = _promote(x)
    n, c, h, w = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine params must be ({c},), got {gamma.shape} and {beta.shape}")
    axes = (0, 2, 3)
    m = n * h * w

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)  # biased, used for normalization
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    ivar = 1.0 / np.sqrt(var + eps)
    xmu = xd - mean[None, :, None, None]
    xhat = xmu * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        g4 = g[None] if squeeze else g
        if gamma.requires_grad:
            _accumulate(gamma, (g4 * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g4.sum(axis=axes))
        if x.requires_grad:
            dxhat = g4 * gamma.data[None, :, None, None]
            if training:
                dvar = (dxhat * xmu).sum(axis=axes) * (-0.5) * ivar ** 3
                dmean = -(dxhat.sum(axis=axes)) * ivar + dvar * (-2.0 / m) * xmu.sum(axis=axes)
                gx = (dxhat * ivar[None, :, None, None]
                      + dvar[None, :, None, None] * 2.0 * xmu / m
                      + dmean[None, :, None, None] / m)
            else:
                gx = dxhat * ivar[None, :, None, None]
            _accumulate(x, gx[0] if squeeze else gx)

    return _node(out[0] if squeeze else out, (x, gamma, beta), backward)
