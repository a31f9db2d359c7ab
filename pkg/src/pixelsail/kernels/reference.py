"""NumPy reference implementations of the convolution/resize kernels.

These are the fallback backend when the compiled extension is unavailable
and the ground truth the compiled kernels are tested against. All arrays
are float32; shapes follow the (channels, height, width) convention.
"""

import numpy as np

F32 = np.float32


def conv_transpose2d_fwd(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """x (Ci,h,w), w (Ci,Co,k,k) with k == stride -> (Co, h*k, w*k).

    With k == stride the output windows do not overlap, so
    out[o, i*k+dy, j*k+dx] = sum_c x[c,i,j] * w[c,o,dy,dx].
    """
    ci, h, wd = x.shape
    _, co, k, _ = w.shape
    out = np.einsum("cij,cokl->oikjl", x, w, optimize=True)
    return np.ascontiguousarray(out.reshape(co, h * k, wd * k), dtype=F32)


def conv_transpose2d_bwd(
    x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv_transpose2d_fwd w.r.t. x and w. g has the output shape."""
    ci, h, wd = x.shape
    _, co, k, _ = w.shape
    g5 = g.reshape(co, h, k, wd, k)
    gx = np.einsum("oikjl,cokl->cij", g5, w, optimize=True)
    gw = np.einsum("cij,oikjl->cokl", x, g5, optimize=True)
    return np.ascontiguousarray(gx, dtype=F32), np.ascontiguousarray(gw, dtype=F32)


def depthwise_conv2d_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x (C,h,w), w (C,k,k) with odd k; zero 'same' padding -> (C,h,w)."""
    c, h, wd = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((c, h + 2 * p, wd + 2 * p), dtype=F32)
    xp[:, p : p + h, p : p + wd] = x
    out = np.zeros((c, h, wd), dtype=F32)
    for dy in range(k):
        for dx in range(k):
            out += xp[:, dy : dy + h, dx : dx + wd] * w[:, dy, dx][:, None, None]
    return out


def depthwise_conv2d_bwd(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of depthwise_conv2d_fwd w.r.t. x and w."""
    c, h, wd = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((c, h + 2 * p, wd + 2 * p), dtype=F32)
    xp[:, p : p + h, p : p + wd] = x
    gp = np.zeros((c, h + 2 * p, wd + 2 * p), dtype=F32)
    gp[:, p : p + h, p : p + wd] = g
    gx = np.zeros((c, h, wd), dtype=F32)
    gw = np.zeros_like(w, dtype=F32)
    for dy in range(k):
        for dx in range(k):
            gw[:, dy, dx] = (xp[:, dy : dy + h, dx : dx + wd] * g).sum(axis=(1, 2))
            # correlation backward == convolution with the flipped kernel
            gx += gp[:, dy : dy + h, dx : dx + wd] * w[:, k - 1 - dy, k - 1 - dx][:, None, None]
    return gx, gw


def _resize_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source coordinates: lo index, hi index, hi weight."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = (src - lo).astype(F32)
    lo0 = np.clip(lo, 0, n_in - 1)
    lo1 = np.clip(lo + 1, 0, n_in - 1)
    return lo0, lo1, frac


def bilinear_resize_fwd(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """x (C,h,w) -> (C,out_h,out_w), bilinear with half-pixel centers, edge clamp."""
    y0, y1, fy = _resize_coords(x.shape[1], out_h)
    x0, x1, fx = _resize_coords(x.shape[2], out_w)
    fy = fy[:, None]
    top = x[:, y0, :] * (1 - fy) + x[:, y1, :] * fy
    out = top[:, :, x0] * (1 - fx) + top[:, :, x1] * fx
    return np.ascontiguousarray(out, dtype=F32)


def bilinear_resize_bwd(in_h: int, in_w: int, g: np.ndarray) -> np.ndarray:
    """Gradient of bilinear_resize_fwd w.r.t. x; g (C,out_h,out_w) -> (C,in_h,in_w)."""
    c, out_h, out_w = g.shape
    y0, y1, fy = _resize_coords(in_h, out_h)
    x0, x1, fx = _resize_coords(in_w, out_w)
    gx = np.zeros((c, in_h, in_w), dtype=F32)
    wy0 = (1 - fy)[:, None]
    wy1 = fy[:, None]
    wx0 = 1 - fx
    wx1 = fx
    yy0 = y0[:, None]
    yy1 = y1[:, None]
    np.add.at(gx, (slice(None), yy0, x0), g * (wy0 * wx0))
    np.add.at(gx, (slice(None), yy0, x1), g * (wy0 * wx1))
    np.add.at(gx, (slice(None), yy1, x0), g * (wy1 * wx0))
    np.add.at(gx, (slice(None), yy1, x1), g * (wy1 * wx1))
    return gx
